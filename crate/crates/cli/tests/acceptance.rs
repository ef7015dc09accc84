//! Acceptance criteria. Each test prints one `criterion N ...: PASS|FAIL`
//! line. Criteria 8 and 9 share one model trained with the standard
//! configuration.
//!
//! Lines go straight to stderr so they show up even when the harness
//! captures output.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use vsf_core::eval::{self, PromptPair, Sampler, SweepRow, YKey};
use vsf_core::flow::backprop::{loss, loss_and_grad};
use vsf_core::flow::{euler_sample, make_dataset, train, ModelConfig, Prompt, ToyModel, TrainConfig};
use vsf_core::guidance::{cfg_combine, nag_combine, nasa_combine, vsf_cross_attention, AttnInputs, GuidanceSpec, Variant};
use vsf_core::mmdit::{block_forward, build_plan, duplicate_negative, joint_attention, BlockParams, Counts, Segment, TokenSeq};
use vsf_core::{Matrix, Rng};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} {name}: {verdict} ({detail})");
}

fn rand_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::random_normal(rows, cols, scale, rng)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Joint softmax over `[K⁺; K⁻]` by explicit loops, then `A⁺V⁺ − α A⁻V⁻`.
fn split_form_oracle(inp: &AttnInputs, alpha: f64) -> Vec<Vec<f64>> {
    let d = inp.q.cols();
    let (np, nn) = (inp.k_pos.rows(), inp.k_neg.rows());
    let mut out = vec![vec![0.0; d]; inp.q.rows()];
    for (i, row) in out.iter_mut().enumerate() {
        let mut logits = Vec::with_capacity(np + nn);
        for j in 0..np + nn {
            let k = if j < np { inp.k_pos.row(j) } else { inp.k_neg.row(j - np) };
            let dot: f64 = inp.q.row(i).iter().zip(k).map(|(a, b)| a * b).sum();
            logits.push(dot / (d as f64).sqrt());
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            let pos: f64 = (0..np).map(|j| e[j] / z * inp.v_pos.get(j, c)).sum();
            let neg: f64 = (0..nn).map(|j| e[np + j] / z * inp.v_neg.get(j, c)).sum();
            row[c] = pos - alpha * neg;
        }
    }
    out
}

#[test]
fn criterion_1_split_form_equivalence() {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = dim(&mut rng, 1, 8);
        let (nq, np, nn) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
        let inp = AttnInputs {
            q: rand_matrix(&mut rng, nq, d, 1.5),
            k_pos: rand_matrix(&mut rng, np, d, 1.5),
            v_pos: rand_matrix(&mut rng, np, d, 1.0),
            k_neg: rand_matrix(&mut rng, nn, d, 1.5),
            v_neg: rand_matrix(&mut rng, nn, d, 1.0),
        };
        let alpha = rng.uniform_range(0.0, 5.0);
        let got = vsf_cross_attention(&inp, alpha).unwrap();
        let want = split_form_oracle(&inp, alpha);
        let scale = want.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for (r, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                worst = worst.max((got.get(r, c) - w).abs() / scale);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-10 && secs < 5.0;
    report(1, "split-form equivalence", pass, &format!("max rel err {worst:.2e}, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_2_reduction_identities() {
    let start = Instant::now();
    let mut rng = Rng::new(202);
    let mut nasa_ok = true;
    let mut nag_err: f64 = 0.0;
    let mut cfg_ok = true;
    for _ in 0..500 {
        let (r, c) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
        let zp = rand_matrix(&mut rng, r, c, 2.0);
        let zn = rand_matrix(&mut rng, r, c, 2.0);
        nasa_ok &= nasa_combine(&zp, &zn, 0.0).unwrap() == zp;
        let phi = rng.uniform_range(0.0, 16.0);
        let tau = rng.uniform_range(1.0, 10.0);
        let blend = rng.uniform();
        nag_err = nag_err.max(nag_combine(&zp, &zn, 0.0, tau, blend).unwrap().max_abs_diff(&zp));
        nag_err = nag_err.max(nag_combine(&zp, &zn, phi, tau, 0.0).unwrap().max_abs_diff(&zp));
        cfg_ok &= cfg_combine(&zn, &zp, 1.0).unwrap() == zp;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = nasa_ok && cfg_ok && nag_err <= 1e-12 && secs < 5.0;
    report(
        2,
        "reduction identities",
        pass,
        &format!("nasa exact {nasa_ok}, cfg exact {cfg_ok}, nag max err {nag_err:.1e}, {secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_nag_norm_cap() {
    let mut rng = Rng::new(303);
    let mut violations = 0;
    for _ in 0..1000 {
        let (r, c) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
        let zp = rand_matrix(&mut rng, r, c, 1.0);
        let zn = rand_matrix(&mut rng, r, c, 3.0);
        let phi = rng.uniform_range(0.0, 16.0);
        let tau = rng.uniform_range(1.0, 10.0);
        let out = nag_combine(&zp, &zn, phi, tau, 1.0).unwrap();
        for i in 0..r {
            let norm = |m: &Matrix| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm(&out) > tau * norm(&zp) + 1e-9 {
                violations += 1;
            }
        }
    }
    let hand = nag_combine(
        &Matrix::from_rows(&[vec![3.0, 4.0]]),
        &Matrix::from_rows(&[vec![0.0, 0.0]]),
        1.0,
        1.2,
        1.0,
    )
    .unwrap();
    let hand_err = (hand.get(0, 0) - 3.6).abs().max((hand.get(0, 1) - 4.8).abs());
    let pass = violations == 0 && hand_err <= 1e-12;
    report(3, "NAG norm cap", pass, &format!("{violations} violating rows, hand example err {hand_err:.1e}"));
    assert!(pass);
}

#[test]
fn criterion_4_mask_structure() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let beta = 0.75;
    for ni in 0..=6 {
        for np in 0..=6 {
            for nn in 0..=6 {
                let counts = Counts::new(ni, np, nn, nn);
                let plan = build_plan(counts, beta).unwrap();
                let (rows, cols) = plan.shape();
                if rows != ni + np + nn || cols != ni + np + 2 * nn {
                    failures.push(format!("{ni},{np},{nn}: plan shape {rows}x{cols}"));
                    continue;
                }
                let seg = |i: usize| {
                    if i < ni {
                        Segment::Img
                    } else if i < ni + np {
                        Segment::Pos
                    } else if i < ni + np + nn {
                        Segment::Neg0
                    } else {
                        Segment::Neg1
                    }
                };
                for q in 0..rows {
                    for k in 0..cols {
                        let (qs, ks) = (seg(q), seg(k));
                        let want = match qs {
                            Segment::Img => ks != Segment::Neg0,
                            Segment::Pos => matches!(ks, Segment::Img | Segment::Pos),
                            Segment::Neg0 => matches!(ks, Segment::Img | Segment::Neg0),
                            Segment::Neg1 => unreachable!("no NEG1 query rows"),
                        };
                        let want_bias = if qs == Segment::Img && ks == Segment::Neg1 { -beta } else { 0.0 };
                        if plan.allow.get(q, k) != want || plan.bias.get(q, k) != want_bias {
                            failures.push(format!("{ni},{np},{nn}: ({q},{k})"));
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 10.0;
    report(4, "mask structure", pass, &format!("343 configurations, {} mismatches, {secs:.2}s", failures.len()));
    assert!(pass, "{:?}", &failures[..failures.len().min(5)]);
}

#[test]
fn criterion_5_beta_limit_and_alpha_affinity() {
    let mut rng = Rng::new(505);
    let mut beta_err: f64 = 0.0;
    let mut affine_err: f64 = 0.0;
    for _ in 0..100 {
        let heads = dim(&mut rng, 1, 2);
        let d_model = heads * dim(&mut rng, 1, 4);
        let params = BlockParams::init(d_model, heads, 2, &mut rng).unwrap();
        let (ni, np, nn) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
        let img = rand_matrix(&mut rng, ni, d_model, 1.0);
        let pos = rand_matrix(&mut rng, np, d_model, 1.0);
        let neg = rand_matrix(&mut rng, nn, d_model, 1.0);
        let seq = TokenSeq::from_parts(&img, &pos, &neg).unwrap();
        let alpha = rng.uniform_range(0.0, 4.0);

        // Masking NEG1 leaves image and positive rows seeing only [I, P], and
        // negative rows never see NEG1 at all.
        let ip = TokenSeq::from_parts(&img, &pos, &Matrix::zeros(0, d_model)).unwrap();
        let ip_out = block_forward(&ip, &params, 0.0, 0.0).unwrap();
        let n_out = block_forward(&seq, &params, alpha, 0.0).unwrap();
        let masked = ip_out.tokens().concat_rows(&n_out.tokens().slice_rows(ni + np..ni + np + nn)).unwrap();
        let limit = block_forward(&seq, &params, alpha, 30.0).unwrap();
        beta_err = beta_err.max(limit.tokens().max_abs_diff(&masked));

        let dup = duplicate_negative(&seq).unwrap();
        let plan = build_plan(dup.counts(), rng.uniform_range(0.0, 2.0)).unwrap();
        let f = |a: f64| joint_attention(&dup, &params, a, &plan).unwrap().into_tokens();
        let (f0, f1) = (f(0.0), f(1.0));
        for a in [0.37, 1.9, alpha] {
            let mut lin = f0.clone();
            lin.add_scaled(&f1.sub(&f0).unwrap(), a).unwrap();
            affine_err = affine_err.max(f(a).max_abs_diff(&lin));
        }
    }
    let pass = beta_err <= 1e-8 && affine_err <= 1e-9;
    report(
        5,
        "beta limit and alpha affinity",
        pass,
        &format!("beta=30 vs masked max diff {beta_err:.1e}, affine residual {affine_err:.1e}"),
    );
    assert!(pass);
}

fn micro_model() -> ToyModel {
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        dim: 8,
        patch: 4,
        mlp_ratio: 2,
        time_features: 4,
    };
    let mut m = ToyModel::init(cfg, 61).unwrap();
    let mut rng = Rng::new(62);
    for (_, t) in m.tensors_mut() {
        // every tensor perturbed away from its init so no gradient is trivially zero
        let noise = Matrix::random_normal(t.rows(), t.cols(), 0.1, &mut rng);
        t.add_scaled(&noise, 1.0).unwrap();
    }
    m
}

#[test]
fn criterion_6_gradient_check() {
    let model = micro_model();
    let mut rng = Rng::new(66);
    let x = Matrix::random_normal(16, 48, 1.0, &mut rng);
    let target = Matrix::random_normal(16, 48, 1.0, &mut rng);
    let prompt = Prompt::parse("a blue circle").unwrap();
    let t = 0.61;
    let mut grads = model.zeros_like();
    loss_and_grad(&model, &x, t, &prompt, &target, &mut grads).unwrap();

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, g)| (n, g.data().to_vec())).collect();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let mut plus = model.clone();
            plus.tensors_mut()[ti].1.data_mut()[i] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[ti].1.data_mut()[i] -= h;
            let fd = (loss(&plus, &x, t, &prompt, &target).unwrap() - loss(&minus, &x, t, &prompt, &target).unwrap()) / (2.0 * h);
            let rel = (ai - fd).abs() / ai.abs().max(fd.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
            checked += 1;
        }
    }
    let pass = worst.0 < 1e-4;
    report(
        6,
        "gradient check",
        pass,
        &format!("{checked} entries over {} tensors, worst rel err {:.1e} at {}", analytic.len(), worst.0, worst.1),
    );
    assert!(pass);
}

#[test]
fn criterion_7_pass_counts_and_cost() {
    let model = ToyModel::init(ModelConfig { layers: 2, dim: 16, ..ModelConfig::default() }, 7).unwrap();
    let pos = Prompt::parse("a cross of any color").unwrap();
    let neg = Prompt::parse("green").unwrap();
    let steps = 4;
    let mut details = Vec::new();
    let mut pass = true;
    for (spec, want) in [
        (GuidanceSpec::none(), 1.0),
        (GuidanceSpec::vsf(1.0, 0.0), 1.0),
        (GuidanceSpec::wef(1.0), 1.0),
        (GuidanceSpec::cfg(2.8), 2.0),
        (GuidanceSpec::nasa(0.5), 1.0),
        (GuidanceSpec::nag(11.0, 5.0, 0.5), 1.0),
    ] {
        let r = euler_sample(&model, &pos, Some(&neg), &spec, steps, 0).unwrap();
        let attn_per_block = r.attention_calls as f64 / (steps * model.config.layers) as f64;
        let want_attn = match spec.variant {
            Variant::Cfg | Variant::Nasa | Variant::Nag => 2.0,
            _ => 1.0,
        };
        pass &= r.forwards_per_step() == want && attn_per_block == want_attn;
        details.push(format!("{}={}/{}", spec.variant, r.forwards_per_step(), attn_per_block));
    }
    let none = eval::attn_cost(Variant::None, 1024, 128, 16, 64, 4, 4);
    let vsf = eval::attn_cost(Variant::Vsf, 1024, 128, 16, 64, 4, 4);
    let ratio = vsf.macs as f64 / none.macs as f64;
    pass &= ratio < 1.1;
    report(
        7,
        "pass counts and attention cost",
        pass,
        &format!("forwards/attention-per-block {}, vsf/none cost ratio {ratio:.4}", details.join(" ")),
    );
    assert!(pass);
}

/// The standard 5k-step model, trained once per test process.
fn standard_model() -> &'static (ToyModel, Duration) {
    static MODEL: OnceLock<(ToyModel, Duration)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let start = Instant::now();
        let data = make_dataset(9000, 0);
        let cfg = TrainConfig::default();
        let mut model = ToyModel::init(ModelConfig::default(), cfg.seed).unwrap();
        let report = train(&mut model, &data, &cfg).unwrap();
        let n = report.losses.len();
        let _ = writeln!(
            std::io::stderr(),
            "standard training: {n} steps in {:.0}s, loss first-100 {:.4} last-100 {:.4}",
            start.elapsed().as_secs_f64(),
            report.mean_window(0..100),
            report.mean_window(n - 100..n)
        );
        (model, start.elapsed())
    })
}

const SEEDS_8: std::ops::Range<u64> = 0..200;

#[test]
fn criterion_8_end_to_end_ordering() {
    let (model, train_time) = standard_model();
    let start = Instant::now();
    let pair = PromptPair::parse("a square of any color", "red").unwrap();
    let suite = std::slice::from_ref(&pair);
    let seeds: Vec<u64> = SEEDS_8.collect();
    let score = |spec: GuidanceSpec| eval::score_suite(model, suite, &spec, &seeds, 8).unwrap();
    let beta = GuidanceSpec::new(Variant::Vsf).beta;

    let none = score(GuidanceSpec::none());
    // calibration: highest negative score whose positive score stays within
    // 0.15 of no guidance; falls back to the highest negative score
    let sweep: Vec<(f64, f64, f64)> = eval::grid(0.0, 4.0, 10)
        .into_iter()
        .map(|a| {
            let s = score(GuidanceSpec::vsf(a, beta));
            (a, s.negative, s.positive)
        })
        .collect();
    let eligible: Vec<&(f64, f64, f64)> = sweep.iter().filter(|(_, _, p)| (p - none.positive).abs() <= 0.15).collect();
    let pool = if eligible.is_empty() { sweep.iter().collect() } else { eligible };
    let &(alpha, neg_star, pos_star) = pool
        .into_iter()
        .fold(None::<&(f64, f64, f64)>, |best, r| match best {
            Some(b) if b.1 >= r.1 => Some(b),
            _ => Some(r),
        })
        .unwrap();

    let mono_grid = [0.0, 0.5, 1.0, 2.0, 3.0];
    let mono: Vec<f64> = mono_grid.iter().map(|&a| score(GuidanceSpec::vsf(a, beta)).negative).collect();
    let wef: Vec<f64> = mono_grid.iter().map(|&a| score(GuidanceSpec::wef(a)).negative).collect();
    let eval_time = start.elapsed();

    let a_ok = neg_star - none.negative >= 0.20;
    let b_ok = mono.windows(2).all(|w| w[1] >= w[0] - 0.03);
    let c_ok = (pos_star - none.positive).abs() <= 0.15;
    let d_ok = wef.iter().all(|n| (n - none.negative).abs() <= 0.05);
    let time_ok = train_time.as_secs() <= 20 * 60 && eval_time.as_secs() <= 10 * 60;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    let pass = a_ok && b_ok && c_ok && d_ok && time_ok;
    report(
        8,
        "end-to-end ordering",
        pass,
        &format!(
            "none neg {:.3} pos {:.3}; vsf alpha*={alpha:.3} neg {neg_star:.3} pos {pos_star:.3}; \
             (a) {a_ok} (b) {b_ok} vsf neg over {mono_grid:?} = [{}] (c) {c_ok} \
             (d) {d_ok} wef neg = [{}]; train {:.0}s eval {:.0}s",
            none.negative,
            none.positive,
            fmt(&mono),
            fmt(&wef),
            train_time.as_secs_f64(),
            eval_time.as_secs_f64()
        ),
    );
    assert!(a_ok, "(a) vsf gain {:.3} < 0.20", neg_star - none.negative);
    assert!(b_ok, "(b) not monotone: {mono:?}");
    assert!(c_ok, "(c) positive drift {:.3}", pos_star - none.positive);
    assert!(d_ok, "(d) wef moved the negative score: {wef:?} vs {:.3}", none.negative);
    assert!(time_ok);
}

/// Best positive score a frontier reaches at negative score ≥ `level`.
fn frontier_at(frontier: &[SweepRow], level: f64) -> f64 {
    frontier
        .iter()
        .filter(|r| r.neg >= level)
        .map(|r| r.pos)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn criterion_9_frontier_trend() {
    let (model, _) = standard_model();
    let suite = eval::standard_suite();
    let seeds: Vec<u64> = (0..8).collect();
    let vsf = eval::sweep(model, &suite, Variant::Vsf, Sampler::Random { seed: 9 }, 66, &seeds, 8).unwrap();
    let nasa = eval::sweep(model, &suite, Variant::Nasa, Sampler::Grid, 10, &seeds, 8).unwrap();
    let fv = eval::pareto_frontier(&vsf.rows, YKey::Positive);
    let fn_ = eval::pareto_frontier(&nasa.rows, YKey::Positive);
    let top = fn_.iter().map(|r| r.neg).fold(f64::NEG_INFINITY, f64::max);
    let mut levels: Vec<f64> = fv.iter().chain(&fn_).map(|r| r.neg).filter(|&n| n >= top - 0.05 && n <= top).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut worst = f64::INFINITY;
    for &l in &levels {
        worst = worst.min(frontier_at(&fv, l) - frontier_at(&fn_, l));
    }
    let pass = worst >= -0.02;
    let fmt = |f: &[SweepRow]| f.iter().map(|r| format!("({:.3},{:.3})", r.neg, r.pos)).collect::<Vec<_>>().join(" ");
    report(
        9,
        "frontier trend (diagnostic)",
        pass,
        &format!(
            "nasa max neg {top:.3}; min vsf-minus-nasa positive over {} levels {worst:.3}; vsf frontier {}; nasa frontier {}",
            levels.len(),
            fmt(&fv),
            fmt(&fn_)
        ),
    );
    // model dependent: reported, not enforced
}

fn run_cli(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["vsflab"];
    argv.extend_from_slice(args);
    let code = vsf_cli::run_command(argv, &mut out, &mut err);
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    String::from_utf8(out).unwrap()
}

/// train → sample → sweep under `root`; returns the produced files' bytes.
fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = root.join("run.cfg");
    std::fs::write(
        &cfg,
        "[model]\nlayers = 2\ndim = 16\n[train]\nsteps = 40\nbatch = 8\ndataset_size = 90\n[sampling]\nseeds = 0..3\n",
    )
    .unwrap();
    let (cfg, root) = (cfg.to_str().unwrap(), root.to_str().unwrap());
    let trained = run_cli(&["train", "--config", cfg, "--out", root]);
    let ckpt = trained.lines().last().unwrap().to_string();
    let train_dir = Path::new(&ckpt).parent().unwrap().to_path_buf();
    let sample = run_cli(&[
        "sample", "--variant", "vsf", "--pos", "a circle", "--neg", "blue", "--alpha", "2", "--seed", "5", "--config", cfg, "--out", root,
        "--checkpoint", &ckpt,
    ]);
    let sample_dir = Path::new(sample.trim()).to_path_buf();
    let sweep = run_cli(&["sweep", "--variant", "vsf", "--runs", "3", "--steps", "4", "--config", cfg, "--out", root, "--checkpoint", &ckpt]);
    let mut files = Vec::new();
    for p in [
        train_dir.join("model.vsft"),
        train_dir.join("loss.csv"),
        sample_dir.join("image.ppm"),
        sample_dir.join("record.csv"),
        Path::new(sweep.trim()).to_path_buf(),
    ] {
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
    }
    files
}

#[test]
fn criterion_10_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    let pass = differing.is_empty();
    report(10, "determinism", pass, &format!("compared {names:?}; differing {differing:?}"));
    assert!(pass);
}
