//! Built-in oracle and property checks behind the `selftest` subcommand.
//! The brute-force oracles here are also reused by the acceptance suite.

use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::{dist2, farthest_point_sample, knn_group, PointCloud};
use crate::mvagg::{aggregate, init_aggregator, AggregatorConfig};
use crate::nn::checkpoint::{decode_checkpoint_into, encode_checkpoint};
use crate::nn::store::ParamStore;
use crate::nn::tape::Tape;
use crate::retrieval::{build_index, query_topk};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::training::{info_nce, info_nce_vars};

/// Reference farthest point sampling: recompute every candidate's distance
/// to the whole selected set at each step, O(N^2 P); ties go to the lowest
/// index, matching the production rule.
pub fn fps_bruteforce(pc: &PointCloud, p: usize, start: usize) -> Vec<usize> {
    let n = pc.len();
    let mut selected = vec![start];
    while selected.len() < p {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = selected
                .iter()
                .map(|&s| dist2(pc.pos(i), pc.pos(s)))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
    }
    selected
}

/// Reference kNN membership: full sort of all points by (squared distance,
/// index) around the center.
pub fn knn_bruteforce(pc: &PointCloud, center: usize, k: usize) -> Vec<usize> {
    let cpos = pc.pos(center);
    let mut order: Vec<(f64, usize)> = (0..pc.len()).map(|i| (dist2(pc.pos(i), cpos), i)).collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Seeded random cloud in the unit cube with unit normals.
pub fn random_cloud(rng: &mut SeededRng, n: usize) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            let mut p = [0.0f64; 9];
            for a in 0..3 {
                p[a] = rng.range(-1.0, 1.0);
            }
            for a in 3..6 {
                p[a] = rng.range(0.0, 1.0);
            }
            let mut nvec = [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)];
            let nn = (nvec[0] * nvec[0] + nvec[1] * nvec[1] + nvec[2] * nvec[2]).sqrt();
            if nn < 1e-6 {
                nvec = [0.0, 0.0, 1.0];
            } else {
                for v in nvec.iter_mut() {
                    *v /= nn;
                }
            }
            p[6] = nvec[0];
            p[7] = nvec[1];
            p[8] = nvec[2];
            p
        })
        .collect();
    PointCloud { points }
}

fn fail(name: &str, detail: String) -> Error {
    Error::Numeric(format!("selftest '{name}' failed: {detail}"))
}

fn check_fps(rng: &mut SeededRng) -> Result<()> {
    for _ in 0..40 {
        let n = 8 + rng.index(41);
        let p = 1 + rng.index(12.min(n));
        let cloud = random_cloud(rng, n);
        let got = farthest_point_sample(&cloud, p, 0)?;
        let want = fps_bruteforce(&cloud, p, 0);
        if got != want {
            return Err(fail("fps-oracle", format!("got {got:?}, oracle {want:?}")));
        }
    }
    Ok(())
}

fn check_knn(rng: &mut SeededRng) -> Result<()> {
    for _ in 0..20 {
        let n = 8 + rng.index(41);
        let k = 1 + rng.index(n.min(10));
        let cloud = random_cloud(rng, n);
        let centers: Vec<usize> = (0..3.min(n)).map(|_| rng.index(n)).collect();
        let set = knn_group(&cloud, &centers, k)?;
        for (ci, &c) in centers.iter().enumerate() {
            let want = knn_bruteforce(&cloud, c, k);
            if set.members[ci] != want {
                return Err(fail("knn-oracle", format!("center {c}: got {:?}, oracle {want:?}", set.members[ci])));
            }
        }
    }
    Ok(())
}

fn unit_rows(rng: &mut SeededRng, b: usize, d: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(b * d);
    for _ in 0..b {
        let mut row: Vec<f64> = (0..d).map(|_| rng.range(-1.0, 1.0)).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        for v in row.iter_mut() {
            *v /= n;
        }
        data.extend_from_slice(&row);
    }
    Tensor::matrix(b, d, data).expect("unit rows")
}

fn check_info_nce(rng: &mut SeededRng) -> Result<()> {
    for b in [2usize, 4, 8] {
        let mut eye = Tensor::<f64>::zeros(vec![b, b]);
        for i in 0..b {
            eye.data_mut()[i * b + i] = 1.0;
        }
        let loss = info_nce(&eye, &eye, 1.0)?;
        let want = -(1f64.exp() / (1f64.exp() + (b as f64 - 1.0))).ln();
        if (loss - want).abs() > 1e-8 {
            return Err(fail("infonce-closed-form", format!("B={b}: {loss} vs {want}")));
        }
    }
    for _ in 0..10 {
        let b = 2 + rng.index(4);
        let d = 4 + rng.index(5);
        let anchors = unit_rows(rng, b, d);
        let targets = unit_rows(rng, b, d);
        let tau = 0.2 + rng.uniform() * 0.8;
        let plain = info_nce(&anchors, &targets, tau)?;

        let mut enumerated = 0.0;
        for i in 0..b {
            let mut denom_max = f64::NEG_INFINITY;
            let logits: Vec<f64> = (0..b)
                .map(|j| {
                    let dot: f64 = anchors
                        .row_slice(i)
                        .iter()
                        .zip(targets.row_slice(j))
                        .map(|(a, t)| a * t)
                        .sum();
                    let l = dot / tau;
                    denom_max = denom_max.max(l);
                    l
                })
                .collect();
            let lse = denom_max + logits.iter().map(|l| (l - denom_max).exp()).sum::<f64>().ln();
            enumerated += lse - logits[i];
        }
        enumerated /= b as f64;
        if (plain - enumerated).abs() > 1e-10 {
            return Err(fail("infonce-enumeration", format!("{plain} vs {enumerated}")));
        }

        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(anchors.clone())?;
        let t = tape.constant(targets.clone())?;
        let inv = tape.constant(Tensor::matrix(1, 1, vec![1.0 / tau])?)?;
        let taped = info_nce_vars(&mut tape, a, t, inv)?;
        let taped_val = tape.value(taped).data()[0];
        if (taped_val - plain).abs() > 1e-10 {
            return Err(fail("infonce-tape", format!("{taped_val} vs {plain}")));
        }
    }
    Ok(())
}

fn check_aggregator(rng: &mut SeededRng) -> Result<()> {
    let cfg = AggregatorConfig {
        feature_dim: 8,
        layers: 1,
        heads: 2,
    };
    let mut store: ParamStore<f32> = ParamStore::new(77);
    init_aggregator(&mut store, &cfg)?;
    for _ in 0..10 {
        let v = 2 + rng.index(4);
        let x = unit_rows(rng, v, cfg.feature_dim).cast::<f32>();
        let base = aggregate(&store, &x, &cfg)?;

        let bsum: f64 = base.beta.iter().sum();
        if (bsum - 1.0).abs() > 1e-5 || base.beta.iter().any(|&b| b < 0.0) {
            return Err(fail("aggregator-beta-simplex", format!("{:?}", base.beta)));
        }

        let mut perm: Vec<usize> = (0..v).collect();
        rng.shuffle(&mut perm);
        let mut pdata = Vec::with_capacity(v * cfg.feature_dim);
        for &r in &perm {
            pdata.extend_from_slice(x.row_slice(r));
        }
        let permuted = aggregate(&store, &Tensor::matrix(v, cfg.feature_dim, pdata)?, &cfg)?;
        for (a, b) in base.f_mvimg.iter().zip(&permuted.f_mvimg) {
            if (a - b).abs() > 1e-6 {
                return Err(fail("aggregator-permutation", format!("{a} vs {b}")));
            }
        }

        let mut ddata = x.data().to_vec();
        ddata.extend_from_slice(x.data());
        let doubled = aggregate(&store, &Tensor::matrix(2 * v, cfg.feature_dim, ddata)?, &cfg)?;
        for (a, b) in base.f_mvimg.iter().zip(&doubled.f_mvimg) {
            if (a - b).abs() > 1e-6 {
                return Err(fail("aggregator-duplication", format!("{a} vs {b}")));
            }
        }
    }
    Ok(())
}

fn check_index(rng: &mut SeededRng) -> Result<()> {
    let entries: Vec<(String, Vec<f32>)> = (0..100)
        .map(|i| {
            let v: Vec<f32> = (0..8).map(|_| rng.range(-1.0, 1.0) as f32).collect();
            (format!("r{i:03}"), v)
        })
        .collect();
    let index = build_index(&entries)?;
    for _ in 0..20 {
        let q: Vec<f32> = (0..8).map(|_| rng.range(-1.0, 1.0) as f32).collect();
        let k = 1 + rng.index(10);
        let got = query_topk(&index, &q, k)?;

        let qn = q.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let mut oracle: Vec<(f64, usize)> = (0..index.len())
            .map(|i| {
                let dot: f64 = index
                    .embedding(i)
                    .iter()
                    .zip(&q)
                    .map(|(&e, &qq)| (e as f64) * (qq as f64 / qn))
                    .sum();
                (dot, i)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (hit, &(_, i)) in got.hits.iter().zip(oracle.iter()) {
            if hit.object_id != format!("r{i:03}") {
                return Err(fail("index-oracle", format!("got {}, oracle r{i:03}", hit.object_id)));
            }
        }
    }
    Ok(())
}

fn check_containers(rng: &mut SeededRng) -> Result<()> {
    let t = unit_rows(rng, 3, 5);
    let bytes = crate::container::encode_tensor(&t);
    let back = crate::container::decode_tensor::<f64>(&bytes)?;
    if back.data() != t.data() {
        return Err(fail("container-roundtrip", "tensor payload changed".into()));
    }

    let mut store: ParamStore<f64> = ParamStore::new(3);
    store.init_uniform("a.w", vec![4, 4], 0.5)?;
    store.init_const("a.b", vec![1, 4], 0.25)?;
    let bytes = encode_checkpoint(&store);
    let mut reloaded: ParamStore<f64> = ParamStore::new(9);
    reloaded.init_uniform("a.w", vec![4, 4], 0.5)?;
    reloaded.init_const("a.b", vec![1, 4], 0.0)?;
    decode_checkpoint_into(&bytes, &mut reloaded)?;
    if encode_checkpoint(&reloaded) != bytes {
        return Err(fail("container-roundtrip", "checkpoint bytes changed".into()));
    }
    Ok(())
}

/// Run every suite, printing one line per suite. Any failure aborts with a
/// numeric error naming the suite.
pub fn selftest(out: &mut dyn Write) -> Result<()> {
    let suites: [(&str, fn(&mut SeededRng) -> Result<()>); 6] = [
        ("fps-oracle", check_fps),
        ("knn-oracle", check_knn),
        ("infonce", check_info_nce),
        ("aggregator-invariance", check_aggregator),
        ("index-oracle", check_index),
        ("container-roundtrip", check_containers),
    ];
    for (name, run) in suites {
        let mut rng = SeededRng::new(SeededRng::derive(1_7711, name));
        run(&mut rng)?;
        writeln!(out, "ok {name}").map_err(Error::from)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_selftest_passes_on_a_clean_build() {
        let mut buf = Vec::new();
        selftest(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().all(|l| l.starts_with("ok ")));
    }

    #[test]
    fn test_bruteforce_oracles_agree_on_a_known_line() {
        // Collinear points 0, 1, 2, 10 on the x axis: farthest-first from
        // index 0 picks 3 (x=10), then 2 (x=2), then 1.
        let cloud = PointCloud {
            points: vec![
                [0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0],
                [1.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0],
                [2.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0],
                [10.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0],
            ],
        };
        assert_eq!(fps_bruteforce(&cloud, 2, 0), vec![0, 3]);
        assert_eq!(fps_bruteforce(&cloud, 3, 0), vec![0, 3, 2]);
        assert_eq!(knn_bruteforce(&cloud, 0, 2), vec![0, 1]);
        assert_eq!(knn_bruteforce(&cloud, 3, 3), vec![3, 2, 1]);
    }
}
