use std::io::{stderr, stdout};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let code = fusionbert_cli::dispatch(&args, &mut stdout().lock(), &mut stderr().lock());
    std::process::exit(code);
}
