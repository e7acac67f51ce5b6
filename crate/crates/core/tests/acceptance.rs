//! Acceptance checks, one PASS/FAIL line per criterion.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestError, TestRunner};
use qrnn::autograd::{grad_check, SteKind, Tape, Var};
use qrnn::bitpack::{dot_multibit, pack, qmatvec, PackedActivation, PackedQuantMatrix};
use qrnn::cells::{gru_step, lstm_step, ActQuant, CellKind, GruVars, LstmVars, Mode, Model, ModelConfig};
use qrnn::data::{periodic_corpus, SequenceBatch, Targets};
use qrnn::modelio::{export_quantized, QuantModel};
use qrnn::quantizers::{
    levels, quantize_balanced, quantize_balanced_with_scale, quantize_det, quantize_unit, quantize_unit_scalar,
    quantize_weights, ActivationRange, QuantConfig, QuantizedMatrix, ThresholdStat,
};
use qrnn::training::{Dataset, TrainConfig, Trainer};
use qrnn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

type Outcome = Result<String, String>;

fn bin_counts(meta: &QuantizedMatrix) -> Vec<usize> {
    let mut counts = vec![0; 1 << meta.bits];
    for &c in &meta.codes {
        counts[c as usize] += 1;
    }
    counts
}

fn symmetric_exact_bins() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let mut mags: Vec<f64> = Vec::with_capacity(128);
        while mags.len() < 128 {
            let m: f64 = rng.random_range(1e-3..10.0);
            if !mags.contains(&m) {
                mags.push(m);
            }
        }
        let data: Vec<f64> = mags.iter().flat_map(|&m| [m, -m]).collect();
        let x = Matrix::from_vec(16, 16, data);
        let (_, meta) = quantize_balanced(&x, 2, 3.0, ThresholdStat::MedianAbs).map_err(|e| e.to_string())?;
        let counts = bin_counts(&meta);
        if counts != [64; 4] {
            return Err(format!("trial {trial}: bins {counts:?}"));
        }
    }
    Ok("1000 inputs, every bin holds 64 of 256".into())
}

fn half_normal_balance() -> Outcome {
    let n = 100_000;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = Matrix::from_vec(1, n, data);
        let (_, meta) = quantize_balanced(&x, 2, 2.5, ThresholdStat::MeanAbs).map_err(|e| e.to_string())?;
        for c in bin_counts(&meta) {
            worst = worst.max((c as f64 - n as f64 / 4.0).abs() / (n as f64 / 4.0));
        }
    }
    let msg = format!("worst relative bin deviation {:.4} over 20 seeds", worst);
    if worst <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bit_kernels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..10_000 {
        let n = rng.random_range(0..=1024);
        let (ka, kw) = (rng.random_range(1..=4u8), rng.random_range(1..=4u8));
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..=levels(ka) as u8)).collect();
        let w: Vec<u8> = (0..n).map(|_| rng.random_range(0..=levels(kw) as u8)).collect();
        let naive: u64 = a.iter().zip(&w).map(|(&x, &y)| x as u64 * y as u64).sum();
        let got = dot_multibit(&pack(&a, ka).unwrap(), &pack(&w, kw).unwrap()).unwrap();
        if got != naive {
            return Err(format!("case {case}: dot {got} != {naive}"));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (rows, cols) = (rng.random_range(1..=16), rng.random_range(1..=1024));
        let (kw, ka) = (rng.random_range(1..=4u8), rng.random_range(1..=4u8));
        let wq = QuantizedMatrix {
            codes: (0..rows * cols)
                .map(|_| rng.random_range(0..=levels(kw) as u8))
                .collect(),
            bits: kw,
            alpha: rng.random_range(0.01..4.0),
            beta: rng.random_range(-2.0..2.0),
            rows,
            cols,
        };
        let (aa, ab) = (rng.random_range(0.01..4.0), rng.random_range(-2.0..2.0));
        let ac: Vec<u8> = (0..cols).map(|_| rng.random_range(0..=levels(ka) as u8)).collect();
        let got = qmatvec(
            &PackedQuantMatrix::from_quantized(&wq).unwrap(),
            &PackedActivation::new(&ac, ka, aa, ab).unwrap(),
        )
        .unwrap();
        let wd = wq.reconstruct();
        let ad: Vec<f64> = ac.iter().map(|&c| aa * c as f64 / levels(ka) as f64 + ab).collect();
        for (r, g) in got.iter().enumerate() {
            let want: f64 = wd.row(r).iter().zip(&ad).map(|(x, y)| x * y).sum();
            let scale: f64 = wd.row(r).iter().zip(&ad).map(|(x, y)| (x * y).abs()).sum();
            worst = worst.max((g - want).abs() / scale.max(1e-300));
        }
    }
    let msg = format!("10000 dot products exact; qmatvec worst relative error {worst:.2e}");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn rand_matrix(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Matrix {
    Matrix::uniform(rows, cols, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn weighted(t: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = t.value(out).shape();
    let w = t.constant(rand_matrix(r, c, seed, -1.0, 1.0));
    let p = t.mul(out, w);
    t.sum(p)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn gradient_suite() -> Outcome {
    let m = |r, c, s| rand_matrix(r, c, s, -1.0, 1.0);
    let unary = |f: fn(&mut Tape, Var) -> Var| -> Build {
        Box::new(move |t, v| {
            let y = f(t, v[0]);
            weighted(t, y, 1)
        })
    };
    let binary = |f: fn(&mut Tape, Var, Var) -> Var| -> Build {
        Box::new(move |t, v| {
            let y = f(t, v[0], v[1]);
            weighted(t, y, 2)
        })
    };
    let mut cases: Vec<(&str, Build, Vec<Matrix>)> = vec![
        ("matmul_t", binary(Tape::matmul_t), vec![m(3, 4, 1), m(5, 4, 2)]),
        ("concat", binary(Tape::concat), vec![m(2, 3, 3), m(2, 2, 4)]),
        ("add", binary(Tape::add), vec![m(3, 3, 5), m(3, 3, 6)]),
        ("sub", binary(Tape::sub), vec![m(3, 3, 5), m(3, 3, 6)]),
        ("mul", binary(Tape::mul), vec![m(3, 3, 5), m(3, 3, 6)]),
        ("add_row", binary(Tape::add_row), vec![m(4, 3, 7), m(1, 3, 8)]),
        ("sigmoid", unary(Tape::sigmoid), vec![rand_matrix(3, 4, 9, -3.0, 3.0)]),
        ("tanh", unary(Tape::tanh), vec![rand_matrix(3, 4, 9, -3.0, 3.0)]),
        ("one_minus", unary(Tape::one_minus), vec![m(3, 4, 10)]),
    ];
    cases.push((
        "scale",
        Box::new(|t, v| {
            let y = t.scale(v[0], -1.7);
            weighted(t, y, 3)
        }),
        vec![m(2, 3, 11)],
    ));
    cases.push((
        "clip",
        Box::new(|t, v| {
            let y = t.clip(v[0], -0.5, 0.5);
            weighted(t, y, 4)
        }),
        vec![Matrix::row_vector(vec![-0.9, -0.3, 0.0, 0.2, 0.45, 0.8])],
    ));
    cases.push((
        "gather",
        Box::new(|t, v| {
            let y = t.gather(v[0], &[2, 0, 2, 1]).unwrap();
            weighted(t, y, 5)
        }),
        vec![m(4, 3, 12)],
    ));
    cases.push((
        "dropout",
        Box::new(|t, v| {
            let y = t.dropout(v[0], 0.4, &mut ChaCha8Rng::seed_from_u64(9));
            weighted(t, y, 6)
        }),
        vec![m(4, 5, 13)],
    ));
    cases.push((
        "softmax_xent",
        Box::new(|t, v| t.softmax_xent(v[0], &[1, 0, 3], Some(&[true, false, true]))),
        vec![rand_matrix(3, 4, 14, -2.0, 2.0)],
    ));
    let (h, e) = (3, 2);
    let mut gru_in = vec![rand_matrix(2, h, 20, 0.0, 1.0), rand_matrix(2, e, 21, 0.0, 1.0)];
    gru_in.extend((0..3).map(|s| rand_matrix(h, h + e, 22 + s, -0.8, 0.8)));
    cases.push((
        "gru_step",
        Box::new(|t, v| {
            let w = GruVars {
                w_z: v[2],
                w_r: v[3],
                w_h: v[4],
            };
            let y = gru_step(t, &w, v[0], v[1], ActQuant(None)).unwrap();
            weighted(t, y, 7)
        }),
        gru_in,
    ));
    let mut lstm_in = vec![
        rand_matrix(2, h, 30, 0.0, 1.0),
        rand_matrix(2, h, 31, -1.0, 1.0),
        rand_matrix(2, e, 32, 0.0, 1.0),
    ];
    lstm_in.extend((0..4).map(|s| rand_matrix(h, h + e, 33 + s, -0.8, 0.8)));
    lstm_in.extend((0..4).map(|s| rand_matrix(1, h, 40 + s, -0.5, 0.5)));
    cases.push((
        "lstm_step",
        Box::new(|t, v| {
            let w = LstmVars {
                w_f: v[3],
                w_i: v[4],
                w_c: v[5],
                w_o: v[6],
                b_f: v[7],
                b_i: v[8],
                b_c: v[9],
                b_o: v[10],
            };
            let (hh, cc) = lstm_step(t, &w, v[0], v[1], v[2], ActQuant(None)).unwrap();
            let a = weighted(t, hh, 8);
            let b = weighted(t, cc, 9);
            t.add(a, b)
        }),
        lstm_in,
    ));

    let mut worst = 0.0f64;
    for (name, build, inputs) in &cases {
        let err = grad_check(build, inputs, 1e-5);
        if err >= 1e-4 {
            return Err(format!("{name}: relative error {err:.2e}"));
        }
        worst = worst.max(err);
    }

    let kinds = [
        (SteKind::Weights(QuantConfig::default()), m(4, 6, 50)),
        (
            SteKind::Weights(QuantConfig {
                balanced: false,
                weight_bits: 3,
                ..QuantConfig::default()
            }),
            m(4, 6, 51),
        ),
        (
            SteKind::Activation {
                bits: 2,
                range: ActivationRange::Unit01,
            },
            rand_matrix(3, 5, 52, 0.0, 1.0),
        ),
    ];
    for (kind, x) in kinds {
        let upstream = rand_matrix(x.rows(), x.cols(), 77, -2.0, 2.0);
        let mut t = Tape::new();
        let leaf = t.leaf(x);
        let q = t.ste_quantize(leaf, kind.clone()).map_err(|e| e.to_string())?;
        let w = t.constant(upstream.clone());
        let p = t.mul(q, w);
        let s = t.sum(p);
        if t.backward(s).unwrap().leaf(&t, leaf) != upstream {
            return Err(format!("{kind:?}: backward differs from upstream"));
        }
    }
    Ok(format!(
        "{} primitives, worst relative error {worst:.2e}; STE backward is the identity",
        cases.len()
    ))
}

fn check<T: std::fmt::Debug>(name: &str, r: Result<(), TestError<T>>) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

fn quantizer_contracts() -> Outcome {
    let cases = 10_000;
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let matrix = (1usize..5, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v))
    });
    let bits = 1u8..=8;

    check(
        "unit idempotence",
        runner.run(&(prop::collection::vec(0.0f64..=1.0, 1..20), bits.clone()), |(v, k)| {
            let q = quantize_unit(&Matrix::from_vec(1, v.len(), v), k).unwrap();
            prop_assert_eq!(quantize_unit(&q, k).unwrap(), q);
            Ok(())
        }),
    )?;
    check(
        "unit monotonicity",
        runner.run(&(0.0f64..=1.0, 0.0f64..=1.0, bits.clone()), |(a, b, k)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_unit_scalar(lo, k) <= quantize_unit_scalar(hi, k));
            Ok(())
        }),
    )?;
    check(
        "det bound",
        runner.run(&(matrix.clone(), bits.clone()), |(x, k)| {
            let Ok((xq, meta)) = quantize_det(&x, k) else {
                return Ok(());
            };
            let bound = meta.alpha / (2.0 * levels(k) as f64) * (1.0 + 1e-12);
            for (a, b) in xq.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= bound);
            }
            Ok(())
        }),
    )?;
    check(
        "det idempotence",
        runner.run(&(matrix.clone(), bits.clone()), |(x, k)| {
            let Ok((xq, _)) = quantize_det(&x, k) else {
                return Ok(());
            };
            let (again, _) = quantize_det(&xq, k).unwrap();
            for (a, b) in again.data().iter().zip(xq.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            Ok(())
        }),
    )?;
    check(
        "det monotonicity",
        runner.run(&(matrix.clone(), bits.clone()), |(x, k)| {
            let Ok((xq, _)) = quantize_det(&x, k) else {
                return Ok(());
            };
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if x.data()[i] <= x.data()[j] {
                        prop_assert!(xq.data()[i] <= xq.data()[j]);
                    }
                }
            }
            Ok(())
        }),
    )?;
    check(
        "balanced bound inside the clip range",
        runner.run(&(matrix.clone(), bits.clone(), 0.5f64..4.0), |(x, k, gamma)| {
            let Ok((xq, meta)) = quantize_balanced(&x, k, gamma, ThresholdStat::MeanAbs) else {
                return Ok(());
            };
            let bound = meta.alpha / (2.0 * levels(k) as f64) * (1.0 + 1e-12);
            for (a, b) in xq.data().iter().zip(x.data()) {
                if b.abs() <= meta.alpha / 2.0 {
                    prop_assert!((a - b).abs() <= bound);
                }
            }
            Ok(())
        }),
    )?;
    check(
        "balanced idempotence",
        runner.run(&(matrix.clone(), bits.clone(), 0.5f64..4.0), |(x, k, gamma)| {
            let Ok((xq, meta)) = quantize_balanced(&x, k, gamma, ThresholdStat::MeanAbs) else {
                return Ok(());
            };
            let (again, m2) = quantize_balanced_with_scale(&xq, k, meta.alpha);
            prop_assert_eq!(m2.codes, meta.codes);
            for (a, b) in again.data().iter().zip(xq.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            Ok(())
        }),
    )?;
    check(
        "balanced monotonicity",
        runner.run(&(matrix.clone(), bits.clone()), |(x, k)| {
            let Ok((xq, _)) = quantize_weights(
                &x,
                &QuantConfig {
                    weight_bits: k,
                    ..QuantConfig::default()
                },
            ) else {
                return Ok(());
            };
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if x.data()[i] <= x.data()[j] {
                        prop_assert!(xq.data()[i] <= xq.data()[j]);
                    }
                }
            }
            Ok(())
        }),
    )?;
    check(
        "balanced scale equivariance",
        runner.run(&(matrix, bits, -8i32..8), |(x, k, e)| {
            let c = 2f64.powi(e);
            let Ok((xq, _)) = quantize_balanced(&x, k, 2.5, ThresholdStat::MedianAbs) else {
                return Ok(());
            };
            let (scaled, _) = quantize_balanced(&x.map(|v| v * c), k, 2.5, ThresholdStat::MedianAbs).unwrap();
            prop_assert_eq!(scaled, xq.map(|v| v * c));
            Ok(())
        }),
    )?;
    Ok(format!("9 properties x {cases} cases"))
}

const TOY_PERIOD: usize = 4;
const TOY_BATCH: usize = 8;
const TOY_UNROLL: usize = 16;

fn toy_run(cell: CellKind, quant: &QuantConfig, seed: u64, steps: u64) -> Trainer {
    let cfg = ModelConfig {
        cell,
        hidden: 16,
        embed: 16,
        vocab: TOY_PERIOD,
        dropout_embed: 0.0,
        dropout_out: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, quant, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: TOY_BATCH,
        unroll: TOY_UNROLL,
        epochs: usize::MAX,
        max_steps: steps,
        eval_every: 500,
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, tc).unwrap();
    t.run(&toy_data()).unwrap();
    t
}

fn toy_data() -> Dataset {
    Dataset::Lm {
        train: periodic_corpus(TOY_PERIOD, (TOY_BATCH * TOY_UNROLL + 1) * 8),
        valid: periodic_corpus(TOY_PERIOD, 400),
    }
}

fn mean_final_ppw(cell: CellKind, balanced: bool) -> f64 {
    let q = QuantConfig {
        balanced,
        ..QuantConfig::default()
    };
    (1..=3)
        .map(|s| toy_run(cell, &q, s, 2000).state.log.last("valid", "ppw").unwrap())
        .sum::<f64>()
        / 3.0
}

fn toy_convergence(balanced_ppw: &[(CellKind, f64)]) -> Outcome {
    let msg = balanced_ppw
        .iter()
        .map(|(c, p)| format!("{c:?} {p:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    if balanced_ppw.iter().all(|(_, p)| *p < 1.5) {
        Ok(format!("mean PPW after 2000 steps: {msg}"))
    } else {
        Err(format!("mean PPW after 2000 steps: {msg}"))
    }
}

fn balanced_vs_unbalanced(balanced_ppw: &[(CellKind, f64)]) -> Outcome {
    let mut parts = vec![];
    let mut ok = true;
    for &(cell, b) in balanced_ppw {
        let u = mean_final_ppw(cell, false);
        ok &= b <= u;
        parts.push(format!("{cell:?} balanced {b:.4} vs unbalanced {u:.4}"));
    }
    if ok {
        Ok(parts.join(", "))
    } else {
        Err(parts.join(", "))
    }
}

fn export_parity_and_size() -> Outcome {
    let mut worst = 0.0f64;
    let mut models = vec![];
    for (i, cell) in [CellKind::Gru, CellKind::Lstm].into_iter().enumerate() {
        for (kw, ka, balanced) in [(2, 2, true), (2, 3, true), (1, 1, true), (3, 2, false)] {
            let q = QuantConfig {
                weight_bits: kw,
                activation_bits: ka,
                balanced,
                ..QuantConfig::default()
            };
            let cfg = ModelConfig {
                cell,
                hidden: 32,
                embed: 16,
                vocab: 20,
                init_scale: 0.4,
                ..ModelConfig::default()
            };
            models.push(Model::new(cfg, &q, &mut ChaCha8Rng::seed_from_u64(10 + i as u64)).unwrap());
        }
        models.push(toy_run(cell, &QuantConfig::default(), 1, 300).model);
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, m) in models.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.brnn"));
        export_quantized(m, &m.quant, &path).map_err(|e| e.to_string())?;
        let packed = QuantModel::read(&path).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        for _ in 0..100 {
            let len = rng.random_range(1..=20);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..m.config.vocab)).collect();
            let batch = SequenceBatch {
                batch: 1,
                time: len,
                inputs: ids.clone(),
                targets: Targets::Tokens(vec![0; len]),
                mask: None,
            };
            let want = m
                .forward(&batch, None, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .logits_values();
            let got = packed.forward(&ids).map_err(|e| e.to_string())?;
            for (g, w) in got.iter().zip(&want) {
                for (a, b) in g.iter().zip(w.data()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }

    let q = QuantConfig::default();
    let cfg = ModelConfig {
        cell: CellKind::Lstm,
        hidden: 300,
        embed: 300,
        vocab: 100,
        ..ModelConfig::default()
    };
    let big = Model::new(cfg, &q, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let s = export_quantized(&big, &q, &dir.path().join("big.brnn")).map_err(|e| e.to_string())?;
    let limit = (2.0 / 32.0) * s.weight_f32_bytes as f64 * 1.02;
    let ratio = s.weight_payload_bytes as f64 / s.weight_f32_bytes as f64;
    let msg = format!(
        "worst logit gap {worst:.2e} over {} models x 100 inputs; 2-bit LSTM-300 payload ratio {ratio:.4}",
        models.len()
    );
    if worst < 1e-5 && (s.weight_payload_bytes as f64) <= limit {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism() -> Outcome {
    let run = |dir: &std::path::Path| -> (String, Vec<u8>, Vec<u8>) {
        let cfg = ModelConfig {
            cell: CellKind::Lstm,
            hidden: 12,
            embed: 12,
            vocab: TOY_PERIOD,
            dropout_embed: 0.2,
            dropout_out: 0.2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, &QuantConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: TOY_BATCH,
            unroll: TOY_UNROLL,
            epochs: 1000,
            max_steps: 300,
            eval_every: 50,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, tc).unwrap();
        t.checkpoint_dir = Some(dir.to_path_buf());
        t.run(&toy_data()).unwrap();
        let last = dir.join("last.ckpt");
        qrnn::modelio::save_checkpoint(&t.checkpoint(), &last).unwrap();
        (
            t.state.log.to_csv(),
            std::fs::read(last).unwrap(),
            std::fs::read(dir.join("best.ckpt")).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (log_a, last_a, best_a) = run(a.path());
    let (log_b, last_b, best_b) = run(b.path());
    if log_a == log_b && last_a == last_b && best_a == best_b {
        Ok(format!(
            "{} log bytes, {} checkpoint bytes identical across runs",
            log_a.len(),
            last_a.len()
        ))
    } else {
        Err("runs with the same seed diverged".into())
    }
}

/// Written to the raw stderr handle so the line shows up without `--nocapture`.
fn line(msg: String) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "{msg}");
}

#[test]
fn acceptance() {
    let mut failed = vec![];
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(m) => line(format!("PASS {id} {name}: {m} ({secs:.1}s)")),
            Err(m) => {
                line(format!("FAIL {id} {name}: {m} ({secs:.1}s)"));
                failed.push(id);
            }
        }
    };
    report(1, "balanced bins exact on symmetric input", &mut symmetric_exact_bins);
    report(2, "half-normal bin balance", &mut half_normal_balance);
    report(3, "bit kernels match integer oracle", &mut bit_kernels);
    report(4, "finite differences and STE", &mut gradient_suite);
    report(5, "quantizer contracts", &mut quantizer_contracts);
    let mut balanced = vec![];
    report(6, "toy LM convergence", &mut || {
        balanced = [CellKind::Gru, CellKind::Lstm]
            .into_iter()
            .map(|c| (c, mean_final_ppw(c, true)))
            .collect();
        toy_convergence(&balanced)
    });
    report(7, "balanced vs unbalanced", &mut || balanced_vs_unbalanced(&balanced));
    report(8, "export parity and size", &mut export_parity_and_size);
    report(9, "determinism", &mut determinism);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
