//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are still run and reported; they only
//! stop counting against the exit status. Anything else that fails makes the
//! target exit non-zero.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use osaq::absorb::{
    absorb_layer, assemble_normal_equation, channel_objective, channel_weights, objective_gradient, solve_channel,
    AbsorbConfig, Temperature,
};
use osaq::corpus::{windows, Generator};
use osaq::linalg::{Cholesky, Matrix, Rng};
use osaq::nullspace::{extract_nullspace, KRule};
use osaq::pipeline::{
    absorb_model, calibrate, evaluate, finalize_hessians, mean_std, quantize_model, sample_corpus, stability_model,
    sweep, tail_count, Evaluation, Hessians,
};
use osaq::quantizer::{quantize, quantize_compensated, quantize_rtn, reconstruction_metrics, Backend, QuantConfig};
use osaq::toymodel::{model_init_with, InitOptions, LayerWeights, ModelConfig};

/// Criteria that fail at desk scale for documented reasons.
const KNOWN_FAILURES: &[u32] = &[9, 10, 11];

const CALIB: usize = 64;
const EVAL: usize = 32;
const SEQ: usize = 128;
const CORPUS_SEED_OFFSET: u64 = 1_000;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

struct Seeded {
    model: LayerWeights<f64>,
    stream: Vec<u8>,
    hessians: Hessians,
}

impl Seeded {
    fn new(seed: u64, extra_seqs: usize) -> Self {
        let model = model_init_with::<f64>(ModelConfig::default(), seed, &InitOptions::desk()).unwrap();
        let stream: Vec<u8> = sample_corpus(&model, CALIB + EVAL + extra_seqs, SEQ, seed + CORPUS_SEED_OFFSET)
            .unwrap()
            .into_iter()
            .map(|t| t as u8)
            .collect();
        let calib = windows(&stream, 0, CALIB, SEQ).unwrap();
        let hessians = finalize_hessians(&calibrate(&model, &calib).unwrap()).unwrap();
        Self { model, stream, hessians }
    }

    fn eval_seqs(&self) -> Vec<Vec<u32>> {
        windows(&self.stream, CALIB * SEQ, EVAL, SEQ).unwrap()
    }
}

fn c1_closed_form_vs_oracle() -> Outcome {
    let t0 = Instant::now();
    let cfg = AbsorbConfig::default();
    let mut worst = f64::NEG_INFINITY;
    for layer in 0..50u64 {
        let mut rng = Rng::seeded(10_000 + layer);
        let k = 1 + rng.below(4);
        let (_, null) = rank_deficient_hessian(16, k, &mut rng);
        let b = basis(null.clone());
        for _ in 0..8 {
            let w = outlier_row(16, &mut rng);
            let s = channel_weights(&w, cfg.tau);
            let eq = assemble_normal_equation(&s, &w, &b, cfg.mu1, cfg.mu2).unwrap();
            let closed = solve_channel(&eq).unwrap();
            let oracle = pgd_minimize(&s, &w, &null, cfg.mu1, cfg.mu2);
            let jc = objective(&s, &w, &null, &closed, cfg.mu1, cfg.mu2);
            let jo = objective(&s, &w, &null, &oracle, cfg.mu1, cfg.mu2);
            worst = worst.max((jc - jo).abs() / jo.abs().max(1e-300));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        pass: worst <= 1e-6 && secs < 60.0,
        detail: format!("max relative objective gap {worst:.2e} over 400 channels, {secs:.1}s"),
    }
}

fn c2_loss_invariance(runs: &[(u64, Evaluation)]) -> Outcome {
    let mut worst_exact = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = Rng::seeded(20_000 + seed);
        let n = 32;
        let r = 4 + rng.below(16);
        let (h, _) = rank_deficient_hessian(n, r, &mut rng);
        let basis = extract_nullspace(&h, 1e-8, KRule::StayBelow).unwrap();
        let rows: Vec<Vec<f64>> = (0..16).map(|_| outlier_row(n, &mut rng)).collect();
        let res = absorb_layer(&Matrix::from_rows(&rows), &basis, &h, &AbsorbConfig::default()).unwrap();
        let fro2 = res.delta_w.norm_fro().powi(2);
        let ratio = quadratic_form(&res.delta_w, &h) / (basis.largest_eigenvalue() * fro2).max(1e-300);
        worst_exact = worst_exact.max(ratio);
    }
    let mut violations = 0;
    let mut layers = 0;
    for (_, e) in runs {
        for l in e.absorb.layers.values() {
            layers += 1;
            if l.result.quadratic_perturbation > l.perturbation_bound() * (1.0 + 1e-9) + 1e-300 {
                violations += 1;
            }
        }
    }
    Outcome {
        id: 2,
        pass: worst_exact <= 1e-10 && violations == 0,
        detail: format!(
            "exact rank deficiency: max ratio {worst_exact:.2e} (limit 1e-10); tail bound violated on {violations}/{layers} pipeline layers"
        ),
    }
}

fn c3_c4_do_no_harm_and_psd(models: &[Seeded]) -> (Outcome, Outcome) {
    let cfg = AbsorbConfig::default();
    let (mut channels, mut harm, mut residual_bad, mut psd_bad) = (0usize, 0usize, 0usize, 0usize);
    let mut worst_residual = 0.0f64;
    for s in models {
        for name in s.model.linear_names() {
            let h = &s.hessians[&name];
            let basis = extract_nullspace(h, cfg.gamma, cfg.rule).unwrap();
            if basis.is_empty() {
                continue;
            }
            let w = s.model.linear(&name).unwrap();
            for row in w.row_iter() {
                channels += 1;
                let sw = channel_weights(row, cfg.tau);
                let eq = assemble_normal_equation(&sw, row, &basis, cfg.mu1, cfg.mu2).unwrap();
                let b = solve_channel(&eq).unwrap();
                let j0 = channel_objective(&sw, row, &basis, &vec![0.0; basis.k()], cfg.mu1, cfg.mu2);
                let j1 = channel_objective(&sw, row, &basis, &b, cfg.mu1, cfg.mu2);
                harm += (j1 > j0) as usize;
                let res = objective_gradient(&eq, &b).iter().map(|x| x.abs()).fold(0.0, f64::max);
                let rho = eq.rho.iter().map(|x| x.abs()).fold(0.0, f64::max);
                worst_residual = worst_residual.max(res / (1.0 + rho));
                residual_bad += (res > 1e-8 * (1.0 + rho)) as usize;
                // λ_min(A) ≥ μ₁ − 1e-9  ⇔  A − (μ₁ − 1e-9)I is positive definite.
                let mut shifted = eq.a.clone();
                for i in 0..shifted.rows() {
                    shifted[(i, i)] -= cfg.mu1 - 1e-9;
                }
                psd_bad += Cholesky::factor(&shifted).is_err() as usize;
            }
        }
    }
    (
        Outcome {
            id: 3,
            pass: harm == 0 && residual_bad == 0 && channels > 0,
            detail: format!(
                "{channels} channels over {} models: J(b*) > J(0) on {harm}, residual above tolerance on {residual_bad} (worst {worst_residual:.1e})",
                models.len()
            ),
        },
        Outcome {
            id: 4,
            pass: psd_bad == 0 && channels > 0,
            detail: format!("lambda_min(A) < mu1 - 1e-9 on {psd_bad}/{channels} channels"),
        },
    )
}

/// Selected eigenvalues at rounding level: the layer's input activations are
/// genuinely rank deficient.
fn exact_null_space(l: &osaq::pipeline::LayerAbsorb) -> bool {
    !l.basis.is_empty() && l.basis.largest_selected() <= 1e-10 * l.basis.largest_eigenvalue()
}

fn c5_suppression(runs: &[(u64, Evaluation)], models: &[Seeded]) -> Outcome {
    #[derive(Default)]
    struct Tally {
        rows: usize,
        ok: usize,
        before: usize,
        after: usize,
        layers: usize,
    }
    let (mut exact, mut other) = (Tally::default(), Tally::default());
    let mut min_layer = (f64::INFINITY, String::new());
    for ((seed, e), s) in runs.iter().zip(models) {
        for (name, l) in &e.absorb.layers {
            if l.basis.is_empty() {
                continue;
            }
            let t = if exact_null_space(l) { &mut exact } else { &mut other };
            let ch = &l.result.channels;
            let good = ch.iter().filter(|c| c.linf_after <= c.linf_before).count();
            t.rows += ch.len();
            t.ok += good;
            t.layers += 1;
            let before = s.model.linear(name).unwrap().as_slice().to_vec();
            let after = l.result.w_prime.as_slice().to_vec();
            let (mean, std) = mean_std(&before);
            t.before += tail_count(&before, mean, std, 5.0);
            t.after += tail_count(&after, mean, std, 5.0);
            let frac = good as f64 / ch.len() as f64;
            if exact_null_space(l) && frac < min_layer.0 {
                min_layer = (frac, format!("{name} seed {seed}"));
            }
        }
    }
    let frac = |t: &Tally| t.ok as f64 / t.rows.max(1) as f64;
    Outcome {
        id: 5,
        pass: exact.layers > 0 && frac(&exact) >= 0.9 && exact.after < exact.before,
        detail: format!(
            "{} layers with exact null space: linf non-increasing on {:.3} of {} rows (lowest layer {:.3}, {}), mass beyond 5 sigma {} -> {}; \
             {} layers with a tail-only null space (not scored): {:.3} of rows, mass {} -> {}",
            exact.layers,
            frac(&exact),
            exact.rows,
            min_layer.0,
            min_layer.1,
            exact.before,
            exact.after,
            other.layers,
            frac(&other),
            other.before,
            other.after
        ),
    }
}

fn c6_quantizer() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = Rng::seeded(60);
    for (bits, gs) in [(2, None), (3, Some(8)), (4, None), (8, Some(4))] {
        let w = Matrix::from_fn(6, 16, |_, _| rng.normal());
        let cfg = QuantConfig { bits, group_size: gs, backend: Backend::Rtn, damping: 0.01 };
        let q = quantize_rtn(&w, &cfg).unwrap();
        let deq = q.dequantize();
        let g = gs.unwrap_or(16);
        for i in 0..6 {
            for j in 0..16 {
                let s = q.params(i, j / g).scale;
                if (deq[(i, j)] - w[(i, j)]).abs() > 0.5 * s * (1.0 + 1e-12) {
                    problems.push(format!("round-trip bound b={bits}"));
                }
            }
        }
        if quantize_rtn(&deq, &cfg).unwrap().dequantize().sub(&deq).unwrap().max_abs() > 1e-12 {
            problems.push(format!("idempotence b={bits}"));
        }
        let h = Matrix::diag(&(0..16).map(|_| 0.1 + rng.uniform()).collect::<Vec<_>>());
        let comp = quantize_compensated(&w, &h, &QuantConfig { backend: Backend::Compensated, ..cfg }).unwrap();
        if comp.codes != q.codes || comp.scales != q.scales || comp.zeros != q.zeros {
            problems.push(format!("diagonal Hessian not bitwise equal b={bits}"));
        }
    }
    let (mut cases, mut worse, mut strictly) = (0usize, 0usize, 0usize);
    for seed in 0..6u64 {
        let mut rng = Rng::seeded(61 + seed);
        let corr = -0.9 + 0.35 * seed as f64;
        let x = Matrix::from_rows(
            &(0..64)
                .map(|_| {
                    let a = rng.normal();
                    [a, corr * a + (1.0 - corr * corr).sqrt() * rng.normal()]
                })
                .collect::<Vec<_>>(),
        );
        let mut acc = osaq::hessian::HessianAccumulator::new("oracle", 2);
        acc.update(&x).unwrap();
        let h = acc.finalize().unwrap();
        for a in -10..=10 {
            for b in -10..=10 {
                let w = [0.1 * a as f64, 0.1 * b as f64 + 0.013];
                let wm = Matrix::from_rows(&[w]);
                let cfg = |backend| QuantConfig { bits: 2, group_size: None, backend, damping: 0.0 };
                let e = |backend| {
                    let q = quantize(&wm, Some(&h), &cfg(backend)).unwrap();
                    reconstruction_metrics(&wm, &q, &x).unwrap().output_mse
                };
                let (rtn, comp) = (e(Backend::Rtn), e(Backend::Compensated));
                let (best, oracle_rtn) = exhaustive_two_column(w, &x, 2);
                if (rtn - oracle_rtn).abs() > 1e-12 * (1.0 + rtn) || best > comp + 1e-12 {
                    problems.push("grid oracle mismatch".into());
                }
                cases += 1;
                worse += (comp > rtn + 1e-12) as usize;
                strictly += (comp < rtn - 1e-12) as usize;
            }
        }
    }
    if worse > 0 {
        problems.push(format!("compensated worse than RTN on {worse} oracle cases"));
    }
    problems.dedup();
    Outcome {
        id: 6,
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("bounds, idempotence and diagonal equality hold; 1x2 b=2 oracle: compensated <= RTN on {cases}/{cases}, strictly better on {strictly}")
        } else {
            problems.join("; ")
        },
    }
}

fn c7_c8_c10(runs: &[(u64, Evaluation)], ablation: &[f64], secs: f64) -> (Outcome, Outcome, Outcome) {
    let n = runs.len();
    let rtn_wins = runs.iter().filter(|(_, e)| e.perplexity.osaq_rtn <= e.perplexity.rtn).count();
    let comp_wins = runs.iter().filter(|(_, e)| e.perplexity.osaq_compensated <= e.perplexity.compensated).count();
    let mean = |f: &dyn Fn(&Evaluation) -> f64| runs.iter().map(|(_, e)| f(e)).sum::<f64>() / n as f64;
    let fp_change = mean(&|e| (e.perplexity.fp_absorbed - e.perplexity.fp).abs() / e.perplexity.fp);
    let l2_wins = runs.iter().zip(ablation).filter(|((_, e), &u)| u >= e.perplexity.osaq_rtn).count();
    (
        Outcome {
            id: 7,
            pass: rtn_wins * 10 >= 8 * n && comp_wins * 10 >= 8 * n && secs < 300.0,
            detail: format!(
                "OSAQ+RTN <= RTN in {rtn_wins}/{n}, OSAQ+Compensated <= Compensated in {comp_wins}/{n} (means {:.2} vs {:.2}, {:.2} vs {:.2}); {secs:.0}s",
                mean(&|e| e.perplexity.osaq_rtn),
                mean(&|e| e.perplexity.rtn),
                mean(&|e| e.perplexity.osaq_compensated),
                mean(&|e| e.perplexity.compensated),
            ),
        },
        Outcome {
            id: 8,
            pass: fp_change <= 0.02,
            detail: format!(
                "mean |FP change| {:.3}% (FP {:.2} -> {:.2})",
                100.0 * fp_change,
                mean(&|e| e.perplexity.fp),
                mean(&|e| e.perplexity.fp_absorbed)
            ),
        },
        Outcome {
            id: 10,
            pass: l2_wins * 10 >= 8 * n,
            detail: format!(
                "uniform-s perplexity >= Softmax-inf in {l2_wins}/{n} seeds (means {:.2} vs {:.2})",
                ablation.iter().sum::<f64>() / n as f64,
                mean(&|e| e.perplexity.osaq_rtn)
            ),
        },
    )
}

fn c9_stability() -> Outcome {
    let cfg = AbsorbConfig::default();
    let mut same = (f64::INFINITY, String::new());
    let mut cross = (f64::INFINITY, String::new());
    let mut exact_min = [f64::INFINITY; 2];
    let (mut both_empty, mut one_sided) = (0, Vec::new());
    for seed in 0..3u64 {
        let s = Seeded::new(seed, CALIB);
        let split2 = windows(&s.stream, (CALIB + EVAL) * SEQ, CALIB, SEQ).unwrap();
        let h2 = finalize_hessians(&calibrate(&s.model, &split2).unwrap()).unwrap();
        let markov = Generator::Markov { alphabet: 96, branching: 6 }.generate(CALIB * SEQ, seed);
        let zipf = Generator::Zipf { alphabet: 96, exponent: 1.1 }.generate(CALIB * SEQ, seed);
        let hm = finalize_hessians(&calibrate(&s.model, &windows(&markov, 0, CALIB, SEQ).unwrap()).unwrap()).unwrap();
        let hz = finalize_hessians(&calibrate(&s.model, &windows(&zipf, 0, CALIB, SEQ).unwrap()).unwrap()).unwrap();
        for (idx, (pair, slot)) in [((&s.hessians, &h2), &mut same), ((&hm, &hz), &mut cross)].into_iter().enumerate() {
            for r in stability_model(pair.0, pair.1, &cfg).unwrap() {
                let exact = [pair.0, pair.1].iter().all(|h| {
                    let b = extract_nullspace(&h[&r.layer], cfg.gamma, cfg.rule).unwrap();
                    !b.is_empty() && b.largest_selected() <= 1e-10 * b.largest_eigenvalue()
                });
                if exact {
                    exact_min[idx] = exact_min[idx].min(r.max_singular_value());
                }
                match (r.k1, r.k2) {
                    (0, 0) => both_empty += 1,
                    (0, _) | (_, 0) => one_sided.push(format!("{} seed {seed} K {}/{}", r.layer, r.k1, r.k2)),
                    _ => {
                        let v = r.max_singular_value();
                        if v < slot.0 {
                            *slot = (v, format!("{} seed {seed}, K {}/{}", r.layer, r.k1, r.k2));
                        }
                    }
                }
            }
        }
    }
    Outcome {
        id: 9,
        pass: same.0 >= 0.95 && cross.0 >= 0.90,
        detail: format!(
            "disjoint splits min {:.4} ({}); markov vs zipf min {:.4} ({}); exact null spaces only: {:.4} and {:.4}; \
             undefined with K=0 on both sides: {both_empty}, on one side: {} {:?}",
            same.0,
            same.1,
            cross.0,
            cross.1,
            exact_min[0],
            exact_min[1],
            one_sided.len(),
            one_sided
        ),
    }
}

fn c11_robustness() -> Outcome {
    let base = AbsorbConfig::default();
    let axes: Vec<(&str, Vec<AbsorbConfig>)> = vec![
        ("gamma", [1e-5, 1e-4, 1e-3].iter().map(|&gamma| AbsorbConfig { gamma, ..base }).collect()),
        (
            "tau_rel",
            [0.02, 0.05, 0.1, 0.2].iter().map(|&t| AbsorbConfig { tau: Temperature::Relative(t), ..base }).collect(),
        ),
        ("mu1", [1e-5, 1e-4, 1e-3].iter().map(|&mu1| AbsorbConfig { mu1, ..base }).collect()),
        ("mu2", [1e-3, 1e-2, 1e-1].iter().map(|&mu2| AbsorbConfig { mu2, ..base }).collect()),
    ];
    let mut worst = BTreeMap::new();
    for seed in 0..3u64 {
        let s = Seeded::new(seed, 0);
        let eval = s.eval_seqs();
        for (axis, grid) in &axes {
            let pts = sweep(&s.model, &s.hessians, &eval, grid, &QuantConfig::default()).unwrap();
            let lo = pts.iter().map(|p| p.perplexity).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p.perplexity).fold(f64::NEG_INFINITY, f64::max);
            let e = worst.entry(*axis).or_insert(0.0f64);
            *e = e.max(hi / lo - 1.0);
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {:.2}%", 100.0 * v)).collect();
    Outcome {
        id: 11,
        pass: max <= 0.05,
        detail: format!("max/min perplexity spread per axis over 3 seeds: {}", parts.join(", ")),
    }
}

fn run_cli(dir: &Path, threads: &str, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_osaq"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads)
        .current_dir(dir)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "osaq {args:?} failed");
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c12_determinism() -> Outcome {
    let small = ["--seed", "5", "--calib-samples", "8", "--eval-samples", "4", "--seq-len", "64"];
    let pipeline: Vec<Vec<&str>> = vec![
        vec!["init"],
        vec!["gen-tokens", "--generator", "model"],
        vec!["gen-tokens", "--generator", "markov", "--token-count", "2048", "--out", "markov"],
        vec!["calibrate", "--model", "model.osaq", "--tokens", "tokens.bin"],
        vec!["absorb", "--model", "model.osaq", "--hessians", "hessians.osaq", "--tokens", "tokens.bin"],
        vec!["quantize", "--model", "absorbed.osaq", "--hessians", "hessians.osaq", "--tokens", "tokens.bin", "--backend", "compensated", "--out", "q"],
        vec!["eval", "--model", "model.osaq", "--hessians", "hessians.osaq", "--tokens", "tokens.bin"],
        vec!["stability", "--model", "model.osaq", "--tokens", "tokens.bin", "--tokens2", "markov/tokens.bin", "--split2-offset", "0"],
        vec!["sweep", "--model", "model.osaq", "--hessians", "hessians.osaq", "--tokens", "tokens.bin", "--sweep-gamma", "1e-5,1e-4", "--sweep-tau-rel", "0.05,uniform"],
        vec!["hist", "--model", "model.osaq", "--absorbed", "absorbed.osaq", "--layer", "layer0.attn.v_proj", "--bins", "32"],
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(a.path(), "1"), (b.path(), "3")] {
        for cmd in &pipeline {
            let mut args: Vec<&str> = cmd.clone();
            args.extend_from_slice(&small);
            run_cli(dir, threads, &args);
        }
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&String> = sa.keys().filter(|k| sa.get(*k) != sb.get(*k)).collect();
    Outcome {
        id: 12,
        pass: differing.is_empty() && sa.len() == sb.len() && sa.len() >= 14,
        detail: format!(
            "{} output files from {} commands, reruns with 1 vs 3 threads; differing: {:?}",
            sa.len(),
            pipeline.len(),
            differing
        ),
    }
}

fn c13_gradient() -> Outcome {
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut rng = Rng::seeded(13_000 + inst);
        let n = 8 + rng.below(25);
        let k = 1 + rng.below(6);
        let null = orthonormal_rows(k, n, &mut rng);
        let w = outlier_row(n, &mut rng);
        let (mu1, mu2) = (1e-4, 1e-2);
        let s = channel_weights(&w, Temperature::Relative(0.05));
        let eq = assemble_normal_equation(&s, &w, &basis(null.clone()), mu1, mu2).unwrap();
        let b: Vec<f64> = rng.normal_vec(k).iter().map(|x| 0.2 * x).collect();
        let g = objective_gradient(&eq, &b);
        let h = 1e-6;
        let fd: Vec<f64> = (0..k)
            .map(|i| {
                let (mut p, mut m) = (b.clone(), b.clone());
                p[i] += h;
                m[i] -= h;
                (objective(&s, &w, &null, &p, mu1, mu2) - objective(&s, &w, &null, &m, mu1, mu2)) / (2.0 * h)
            })
            .collect();
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        worst = worst.max(err / norm);
    }
    Outcome {
        id: 13,
        pass: worst <= 1e-5,
        detail: format!("max relative gradient error {worst:.2e} over 20 instances"),
    }
}

fn main() {
    let start = Instant::now();
    let mut outcomes = vec![c1_closed_form_vs_oracle(), c6_quantizer(), c13_gradient()];

    let t7 = Instant::now();
    let models: Vec<Seeded> = (0..10).map(|seed| Seeded::new(seed, 0)).collect();
    let runs: Vec<(u64, Evaluation)> = models
        .iter()
        .enumerate()
        .map(|(seed, s)| {
            let e = evaluate(&s.model, &s.hessians, &s.eval_seqs(), &AbsorbConfig::default(), &QuantConfig::default());
            (seed as u64, e.unwrap())
        })
        .collect();
    let secs7 = t7.elapsed().as_secs_f64();
    let uniform = AbsorbConfig { tau: Temperature::Uniform, ..Default::default() };
    let ablation: Vec<f64> = models
        .iter()
        .map(|s| {
            let absorbed = absorb_model(&s.model, &s.hessians, &uniform).unwrap();
            let q = quantize_model(&absorbed.model, &s.hessians, &QuantConfig::default()).unwrap();
            q.model.perplexity_many(&s.eval_seqs()).unwrap()
        })
        .collect();
    let (o7, o8, o10) = c7_c8_c10(&runs, &ablation, secs7);
    outcomes.extend([o7, o8, o10, c2_loss_invariance(&runs), c5_suppression(&runs, &models)]);

    let more: Vec<Seeded> = (10..20).map(|seed| Seeded::new(seed, 0)).collect();
    let all: Vec<Seeded> = models.into_iter().chain(more).collect();
    let (o3, o4) = c3_c4_do_no_harm_and_psd(&all);
    drop(all);
    outcomes.extend([o3, o4, c9_stability(), c11_robustness(), c12_determinism()]);
    outcomes.sort_by_key(|o| o.id);

    let mut unexpected = Vec::new();
    for o in &outcomes {
        let known = KNOWN_FAILURES.contains(&o.id);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {:>2}: {tag}  {}", o.id, o.detail);
        if !o.pass && !known {
            unexpected.push(o.id);
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("{passed}/{} criteria pass in {:.0}s", outcomes.len(), start.elapsed().as_secs_f64());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
