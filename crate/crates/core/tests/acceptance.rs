//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines show up in ordinary `cargo test` output.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ixvector::backend::LdaModel;
use ixvector::codec::Provenance;
use ixvector::config::{EnrollMode, PipelineConfig};
use ixvector::dataio::{generate_synthetic_corpus, Labels, SynthSpec};
use ixvector::eval::{
    build_pools, check_hygiene, eer, run_protocol, Case, Corpus, HygieneRecord, Protocol, ProtocolRun, ScoreTable,
    SegmentKey,
};
use ixvector::features::FeatureSegment;
use ixvector::gmm::{train_ubm, Ubm, UbmConfig};
use ixvector::ivector::{accumulate_stats, extract_ivector, StatsMode, TotalVariability};
use ixvector::systems::{train_system, Enrollment, System, SystemKind};
use ixvector::xvector::{PoolMode, Shape, XvecNet};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("UBM EM monotonicity", c1_em_monotone),
        ("i-vector dense oracle", c2_ivector_oracle),
        ("single-channel collapse", c3_single_channel),
        ("x-vector gradient check", c4_gradients),
        ("EER oracle", c5_eer),
        ("end-to-end identification", c6_identification),
        ("fusion gain over 5 seeds", c7_fusion),
        ("segment-length trend", c8_segment_length),
        ("protocol hygiene", c9_hygiene),
        ("persistence round trip", c10_persistence),
    ];
    // ACCEPTANCE_ONLY=6,10 runs a subset while iterating locally.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}; {secs:.1} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail}; {secs:.1} s)", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

/// Direct mean per-frame log-likelihood of a diagonal GMM.
fn oracle_log_likelihood(ubm: &Ubm, frames: &[f64]) -> f64 {
    let d = ubm.dim();
    let n = frames.len() / d;
    let mut total = 0.0;
    for x in frames.chunks(d) {
        let p: f64 = (0..ubm.n_mixtures())
            .map(|k| {
                let (m, v) = (ubm.mean(k), ubm.variance(k));
                let mut e = 0.0;
                let mut det = 1.0;
                for j in 0..d {
                    e += (x[j] - m[j]).powi(2) / v[j];
                    det *= 2.0 * std::f64::consts::PI * v[j];
                }
                ubm.weights()[k] * (-0.5 * e).exp() / det.sqrt()
            })
            .sum();
        total += p.ln();
    }
    total / n as f64
}

fn c1_em_monotone() -> Outcome {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let centres = [[-3.0, 0.0, 1.0], [2.0, 2.0, -1.0], [0.0, -3.0, 0.0], [3.0, -1.0, 3.0]];
    let mut frames = Vec::with_capacity(2000 * d);
    for i in 0..2000 {
        let c = centres[i % 4];
        for j in 0..d {
            frames.push(c[j] + Normal::new(0.0, 0.5 + 0.25 * j as f64).unwrap().sample(&mut rng));
        }
    }
    let t = Instant::now();
    let cfg = UbmConfig {
        n_mixtures: 4,
        max_iters: 100,
        tol: 1e-12,
        seed: 3,
        ..UbmConfig::default()
    };
    let fit = train_ubm(&frames, d, &cfg).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let lls = &fit.log_likelihoods;
    ensure(lls.len() >= 2, || format!("only {} EM iterations", lls.len()))?;
    let worst = lls.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    ensure(worst >= -1e-8, || format!("log-likelihood fell by {}", -worst))?;
    // The recorded trace must be the true objective, and the final model no worse.
    let last = oracle_log_likelihood(&fit.ubm, &frames);
    ensure(last >= lls[lls.len() - 1] - 1e-8, || {
        format!("final model ll {last} below last recorded {}", lls[lls.len() - 1])
    })?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("{} iterations, largest drop {:.1e}, final ll {last:.4}", lls.len(), (-worst).max(0.0)))
}

// 2 ------------------------------------------------------------------------

fn random_ubm(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Ubm {
    let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let means = (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let vars = (0..k * d).map(|_| rng.gen_range(0.3..2.0)).collect();
    Ubm::new(w, means, vars, d).unwrap()
}

fn random_features(c: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSegment {
    let data = (0..c * n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    FeatureSegment::from_parts(Labels::new("s", "e", "t"), c, n, d, data).unwrap()
}

/// Builds N, F and Σ as dense matrices from first principles and solves
/// `w = (I + Tᵗ Σ⁻¹ N T)⁻¹ Tᵗ Σ⁻¹ F` with explicit inverses.
fn oracle_ivector(ubm: &Ubm, feat: &FeatureSegment, modified: bool, t: &DMatrix<f64>, sigma: &[f64]) -> DVector<f64> {
    let (k, d, c) = (ubm.n_mixtures(), ubm.dim(), feat.n_channels());
    let blocks = if modified { k * c } else { k };
    let rows = blocks * d;
    let mut n_diag = vec![0.0; rows];
    let mut f = DVector::zeros(rows);
    for ch in 0..c {
        for i in 0..feat.n_frames() {
            let x = feat.frame(ch, i);
            let joint: Vec<f64> = (0..k)
                .map(|m| {
                    let mut e = 0.0;
                    let mut det = 1.0;
                    for j in 0..d {
                        e += (x[j] - ubm.mean(m)[j]).powi(2) / ubm.variance(m)[j];
                        det *= 2.0 * std::f64::consts::PI * ubm.variance(m)[j];
                    }
                    ubm.weights()[m] * (-0.5 * e).exp() / det.sqrt()
                })
                .collect();
            let z: f64 = joint.iter().sum();
            for m in 0..k {
                let g = joint[m] / z;
                let b = if modified { m * c + ch } else { m };
                for j in 0..d {
                    n_diag[b * d + j] += g;
                    f[b * d + j] += g * (x[j] - ubm.mean(m)[j]);
                }
            }
        }
    }
    let n = DMatrix::from_diagonal(&DVector::from_vec(n_diag));
    let sigma_inv = DMatrix::from_diagonal(&DVector::from_column_slice(sigma)).try_inverse().unwrap();
    let r = t.ncols();
    let l = DMatrix::identity(r, r) + t.transpose() * &sigma_inv * n * t;
    l.try_inverse().unwrap() * t.transpose() * sigma_inv * f
}

fn c2_ivector_oracle() -> Outcome {
    let (k, d, c, r) = (2, 2, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let ubm = random_ubm(k, d, &mut rng);
        let feat = random_features(c, rng.gen_range(3..12), d, &mut rng);
        for (mode, modified) in [(StatsMode::Modified, true), (StatsMode::Baseline, false)] {
            let rows = if modified { k * c * d } else { k * d };
            let t: Vec<f64> = (0..rows * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sigma: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.2..3.0)).collect();
            let tv = TotalVariability::new(mode, k, c, d, r, &t, sigma.clone(), ubm.fingerprint()).unwrap();
            let stats = accumulate_stats(&ubm, &feat, mode).map_err(|e| e.to_string())?;
            let w = DVector::from_vec(extract_ivector(&tv, &stats).map_err(|e| e.to_string())?.w);
            let want = oracle_ivector(&ubm, &feat, modified, &DMatrix::from_row_slice(rows, r, &t), &sigma);
            worst = worst.max((w - &want).norm() / want.norm());
        }
    }
    ensure(worst < 1e-10, || format!("relative error {worst:.2e}"))?;
    Ok(format!("100 instances x 2 layouts, worst relative error {worst:.1e}"))
}

// 3 ------------------------------------------------------------------------

fn small_corpus_pools(n_subjects: usize, duration_s: f64, cfg: &PipelineConfig) -> ixvector::eval::Pools {
    let spec = SynthSpec {
        n_subjects,
        n_tasks: 1,
        duration_s,
        ..SynthSpec::default()
    };
    let (recs, manifest) = generate_synthetic_corpus(&spec, 21).unwrap();
    let corpus = Corpus::new(&recs, &manifest).unwrap();
    build_pools(&corpus, cfg, &[cfg.features.segment_s]).unwrap()
}

fn c3_single_channel() -> Outcome {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 4;
    cfg.ubm.baseline_mixtures = 4;
    cfg.ubm.modified_mixtures = 4;
    cfg.ivector.rank = 8;
    cfg.ivector.n_iters = 3;
    let pools = small_corpus_pools(4, 45.0, &cfg);
    let one = |segs: &[FeatureSegment]| -> Vec<FeatureSegment> { segs.iter().map(|f| f.select_channels(&[0]).unwrap()).collect() };
    let (train, test) = (one(&pools.train), one(&pools.test[0].1));
    let train_refs: Vec<&FeatureSegment> = train.iter().collect();

    let (base, _) = train_system(SystemKind::IvectorBaseline, &cfg, &train_refs, &[]).map_err(|e| e.to_string())?;
    let (modi, _) = train_system(SystemKind::Ivector, &cfg, &train_refs, &[]).map_err(|e| e.to_string())?;
    let mut worst_i: f64 = 0.0;
    for f in &test {
        let a = base.embed(f).map_err(|e| e.to_string())?.v;
        let b = modi.embed(f).map_err(|e| e.to_string())?.v;
        ensure(a.len() == b.len(), || format!("embedding sizes {} vs {}", a.len(), b.len()))?;
        for (x, y) in a.iter().zip(&b) {
            worst_i = worst_i.max((x - y).abs() / x.abs().max(y.abs()).max(1e-300));
        }
    }
    ensure(worst_i <= 1e-12, || format!("i-vector embeddings differ by {worst_i:.2e}"))?;

    let shape = Shape {
        n_channels: 1,
        dim: test[0].dim(),
        h1: 7,
        h2: 5,
        embed: 4,
        n_classes: 3,
    };
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let xb = XvecNet::new(PoolMode::Baseline, shape, classes.clone(), 9).map_err(|e| e.to_string())?;
    let mut xm = XvecNet::new(PoolMode::Modified, shape, classes, 1).map_err(|e| e.to_string())?;
    ensure(xb.params().len() == xm.params().len(), || "parameter counts differ".into())?;
    xm.params_mut().copy_from_slice(xb.params());
    let mut worst_x: f64 = 0.0;
    for f in &test {
        let (a, b) = (xb.forward(f).map_err(|e| e.to_string())?, xm.forward(f).map_err(|e| e.to_string())?);
        for (x, y) in a.logits.iter().chain(&a.embedding).zip(b.logits.iter().chain(&b.embedding)) {
            worst_x = worst_x.max((x - y).abs() / x.abs().max(y.abs()).max(1e-300));
        }
    }
    ensure(worst_x <= 1e-12, || format!("x-vector forward passes differ by {worst_x:.2e}"))?;
    Ok(format!("{} segments, i-vector diff {worst_i:.1e}, x-vector diff {worst_x:.1e}", test.len()))
}

// 4 ------------------------------------------------------------------------

fn fd_worst(mode: PoolMode) -> Result<Vec<(&'static str, f64)>, String> {
    let shape = Shape {
        n_channels: 2,
        dim: 4,
        h1: 6,
        h2: 5,
        embed: 3,
        n_classes: 3,
    };
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    // Central differences need the loss to be smooth within one step, so
    // draw until no ReLU input lies within 0.02 of its kink.
    let (mut net, feats) = (0u64..1000)
        .find_map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = XvecNet::new(mode, shape, classes.clone(), seed).unwrap();
            for p in net.params_mut() {
                *p += rng.gen_range(-0.1..0.1);
            }
            let feats: Vec<FeatureSegment> = (0..3).map(|_| random_features(2, 5, 4, &mut rng)).collect();
            let margin = feats.iter().map(|f| net.relu_margin(f).unwrap()).fold(f64::INFINITY, f64::min);
            (margin > 0.02).then_some((net, feats))
        })
        .ok_or("no kink-free draw")?;
    let batch: Vec<(&FeatureSegment, usize)> = feats.iter().zip([0, 1, 2]).collect();
    let (_, grad) = net.batch_gradient(&batch).map_err(|e| e.to_string())?;
    let h = 1e-3;
    let mut out = Vec::new();
    for (name, at, len) in net.tensors() {
        let mut worst: f64 = 0.0;
        for i in at..at + len {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let up = net.batch_gradient(&batch).unwrap().0;
            net.params_mut()[i] = orig - h;
            let down = net.batch_gradient(&batch).unwrap().0;
            net.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8));
        }
        out.push((name, worst));
    }
    Ok(out)
}

fn c4_gradients() -> Outcome {
    let t = Instant::now();
    let mut overall: f64 = 0.0;
    let mut tensors = 0;
    for mode in [PoolMode::Modified, PoolMode::Baseline] {
        for (name, err) in fd_worst(mode)? {
            ensure(err < 1e-4, || format!("{mode:?} {name}: relative error {err:.2e}"))?;
            overall = overall.max(err);
            tensors += 1;
        }
    }
    ensure(t.elapsed() < Duration::from_secs(30), || format!("took {:?}", t.elapsed()))?;
    Ok(format!("{tensors} tensors over both pooling modes, worst relative error {overall:.1e}"))
}

// 5 ------------------------------------------------------------------------

/// EER by enumerating every threshold and counting errors from scratch.
fn oracle_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let rates = |th: f64| {
        let far = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nontargets.len() as f64;
        let frr = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
        (far, frr)
    };
    let mut prev: Option<(f64, f64)> = None;
    for th in thresholds {
        let (far, frr) = rates(th);
        if far == frr {
            return far;
        }
        if far < frr {
            let (pf, pr) = prev.expect("FAR starts at 1 and FRR at 0");
            let a = (pf - pr) / ((pf - pr) - (far - frr));
            return pf + a * (far - pf);
        }
        prev = Some((far, frr));
    }
    unreachable!()
}

fn random_table(rows: usize, subjects: usize, shift: f64, quantum: Option<f64>, rng: &mut ChaCha8Rng) -> ScoreTable {
    let names: Vec<String> = (0..subjects).map(|s| format!("s{s:02}")).collect();
    let mut table = ScoreTable::new(names.clone());
    let normal = Normal::new(0.0, 1.0).unwrap();
    for r in 0..rows {
        let truth = r % subjects;
        let scores = (0..subjects)
            .map(|j| {
                let v = normal.sample(rng) + if j == truth { shift } else { 0.0 };
                quantum.map_or(v, |q| (v / q).round() * q)
            })
            .collect();
        table.push(Labels::new(names[truth].clone(), "e", "t"), r, scores).unwrap();
    }
    table
}

fn c5_eer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut tables = 0;
    for shift in [0.0, 0.5, 1.5, 3.0] {
        for quantum in [None, Some(0.25)] {
            for _ in 0..5 {
                let table = random_table(100, 10, shift, quantum, &mut rng);
                let (t, n) = ixvector::eval::split_scores(&table);
                ensure(t.len() + n.len() == 1000, || "table is not 1000 scores".into())?;
                let got = eer(&table).map_err(|e| e.to_string())?;
                worst = worst.max((got - oracle_eer(&t, &n)).abs());
                tables += 1;
            }
        }
    }
    ensure(worst <= 1e-9, || format!("EER differs from enumeration by {worst:.2e}"))?;
    for gap in [1e-9, 0.5, 10.0] {
        let mut table = random_table(100, 10, 0.0, None, &mut rng);
        for (row, &truth) in table.scores.iter_mut().zip(&table.truth) {
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row[truth] = top + gap;
        }
        // Every target must beat every non-target, not just its own row.
        let (t, n) = ixvector::eval::split_scores(&table);
        let lift = n.iter().copied().fold(f64::NEG_INFINITY, f64::max) + gap;
        for (row, &truth) in table.scores.iter_mut().zip(&table.truth) {
            row[truth] = row[truth].max(lift) + t.len() as f64 * 0.0;
        }
        let got = eer(&table).map_err(|e| e.to_string())?;
        ensure(got == 0.0, || format!("separated table (gap {gap}) gave EER {got}"))?;
    }
    Ok(format!("{tables} random tables, worst |diff| {worst:.1e}; separated tables give 0"))
}

// 6, 7 ---------------------------------------------------------------------

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const COMPARED: [SystemKind; 4] = [SystemKind::IvectorBaseline, SystemKind::Ivector, SystemKind::Xvector, SystemKind::Ix];

fn accuracy(run: &ProtocolRun, kind: SystemKind) -> f64 {
    run.reports
        .iter()
        .find(|r| r.system == kind.name())
        .map(|r| r.rank1_accuracy)
        .expect("report for every requested system")
}

struct SeedRun {
    seed: u64,
    acc: [f64; 4],
    elapsed: Duration,
}

fn session_disjoint_runs() -> &'static [SeedRun] {
    use std::sync::OnceLock;
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let t = Instant::now();
                let spec = SynthSpec::default();
                let (recs, manifest) = generate_synthetic_corpus(&spec, seed).unwrap();
                let corpus = Corpus::new(&recs, &manifest).unwrap();
                let cfg = PipelineConfig {
                    seed,
                    ..PipelineConfig::default()
                };
                let run = run_protocol(Protocol::SessionDisjoint, &COMPARED, &corpus, &cfg).unwrap();
                SeedRun {
                    seed,
                    acc: COMPARED.map(|k| accuracy(&run, k)),
                    elapsed: t.elapsed(),
                }
            })
            .collect()
    })
}

fn c6_identification() -> Outcome {
    let spec = SynthSpec::default();
    let cfg = PipelineConfig::default();
    ensure(
        spec.n_subjects == 10 && spec.n_sessions == 3 && spec.n_channels == 9 && cfg.features.segment_s == 15.0,
        || "default corpus is not the 10-subject, 3-session, 9-channel, 15 s setup".into(),
    )?;
    ensure(spec.subject_sd >= 10.0 * spec.session_sd, || "subject_sd is not much larger than session_sd".into())?;
    let chance = 1.0 / spec.n_subjects as f64;
    let mut lines = Vec::new();
    for r in session_disjoint_runs() {
        let (base, modi) = (r.acc[0], r.acc[1]);
        ensure(modi >= 0.90, || format!("seed {}: modified i-vector {:.2}% < 90%", r.seed, 100.0 * modi))?;
        ensure(modi > base, || format!("seed {}: modified {:.2}% not above baseline {:.2}%", r.seed, 100.0 * modi, 100.0 * base))?;
        // "Well above chance": at least three times chance.
        ensure(base >= 3.0 * chance, || format!("seed {}: baseline {:.2}% is near chance", r.seed, 100.0 * base))?;
        ensure(r.elapsed < Duration::from_secs(300), || format!("seed {}: run took {:?}", r.seed, r.elapsed))?;
        lines.push(format!("seed {} baseline {:.2}% modified {:.2}% in {:.0} s", r.seed, 100.0 * base, 100.0 * modi, r.elapsed.as_secs_f64()));
    }
    Ok(lines.join(", "))
}

fn c7_fusion() -> Outcome {
    let mut lines = Vec::new();
    let mut worst = f64::INFINITY;
    for r in session_disjoint_runs() {
        let (modi, xv, ix) = (r.acc[1], r.acc[2], r.acc[3]);
        let margin = 100.0 * (ix - modi.max(xv));
        worst = worst.min(margin);
        lines.push(format!("seed {} i {:.2} x {:.2} ix {:.2}", r.seed, 100.0 * modi, 100.0 * xv, 100.0 * ix));
        ensure(margin >= -2.0, || format!("seed {}: ix is {:.2} points below the better part", r.seed, -margin))?;
    }
    Ok(format!("{}; worst ix - max(i, x) = {worst:+.2} points", lines.join(", ")))
}

// 8 ------------------------------------------------------------------------

fn c8_segment_length() -> Outcome {
    let seed = 1;
    let (recs, manifest) = generate_synthetic_corpus(&SynthSpec::default(), seed).unwrap();
    let corpus = Corpus::new(&recs, &manifest).unwrap();
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    ensure(cfg.protocol.test_lengths_s == [15.0, 30.0, 60.0], || "test lengths are not 15/30/60 s".into())?;
    let run = run_protocol(Protocol::SegmentLength, &[SystemKind::Ivector, SystemKind::Ix], &corpus, &cfg)
        .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for kind in [SystemKind::Ivector, SystemKind::Ix] {
        let acc = |len: u32| -> f64 {
            let condition = format!("test={len}s");
            let r = run.results.iter().find(|r| r.system == kind && r.condition == condition).expect("condition");
            ixvector::eval::rank1_accuracy(&r.table).unwrap() * 100.0
        };
        let (a15, a30, a60) = (acc(15), acc(30), acc(60));
        ensure(a60 >= a30 && a30 >= a15 - 1.0, || format!("{kind}: 15/30/60 s accuracies {a15:.2}/{a30:.2}/{a60:.2}"))?;
        lines.push(format!("{kind} {a15:.2}/{a30:.2}/{a60:.2}%"));
    }
    Ok(lines.join(", "))
}

// 9 ------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Withheld {
    Task,
    Subject,
}

/// Independent audit of one fold: nothing a trainable component saw may
/// overlap a test segment or share its task (or subject).
fn audit(record: &HygieneRecord, rule: Withheld) -> Vec<String> {
    let tasks: BTreeSet<&str> = record.tests.iter().map(|k| k.labels.task_id.as_str()).collect();
    let subjects: BTreeSet<&str> = record.tests.iter().map(|k| k.labels.subject_id.as_str()).collect();
    let mut bad = Vec::new();
    for (component, seen) in record.exposure.components() {
        for k in seen {
            let overlap = record
                .tests
                .iter()
                .any(|t| t.labels == k.labels && t.start_ms < k.end_ms && k.start_ms < t.end_ms);
            let withheld = match rule {
                Withheld::Task => tasks.contains(k.labels.task_id.as_str()),
                Withheld::Subject => subjects.contains(k.labels.subject_id.as_str()),
            };
            if overlap || withheld {
                bad.push(format!("{component} saw {:?}", k));
            }
        }
    }
    bad
}

fn c9_hygiene() -> Outcome {
    let spec = SynthSpec {
        n_subjects: 6,
        duration_s: 60.0,
        ..SynthSpec::default()
    };
    let (recs, manifest) = generate_synthetic_corpus(&spec, 9).unwrap();
    let corpus = Corpus::new(&recs, &manifest).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.seed = 9;
    cfg.xvector.epochs = 4;
    // Ix trains every component (UBM, T, network, both LDAs); GMM adds a MAP-only path.
    let systems = [SystemKind::Ix, SystemKind::Gmm];
    let mut notes = Vec::new();
    for (protocol, rule) in [
        (Protocol::LeaveTaskOut(Case::Two), Withheld::Task),
        (Protocol::LeaveSubjectOut(Case::Two), Withheld::Subject),
    ] {
        let run = run_protocol(protocol, &systems, &corpus, &cfg).map_err(|e| format!("{protocol}: {e}"))?;
        let mut folds = 0;
        for result in &run.results {
            ensure(!result.hygiene.is_empty(), || format!("{protocol}: no hygiene records for {}", result.system))?;
            let tested: usize = result.hygiene.iter().map(|h| h.tests.len()).sum();
            ensure(tested == result.table.len(), || {
                format!("{protocol}: records list {tested} test segments, table has {}", result.table.len())
            })?;
            for record in &result.hygiene {
                ensure(!record.exposure.is_empty(), || format!("{protocol}: empty exposure"))?;
                let bad = audit(record, rule);
                ensure(bad.is_empty(), || format!("{protocol}: {} violations, first {}", bad.len(), bad[0]))?;
                if let Withheld::Task = rule {
                    let tasks: BTreeSet<_> = record.tests.iter().map(|k| &k.labels.task_id).collect();
                    ensure(tasks.len() == 1, || format!("{protocol}: a fold tests {} tasks", tasks.len()))?;
                }
                folds += 1;

                // Negative controls: a leaked test segment, and a withheld
                // task or subject seen through a different session, must fail
                // both the library check and the audit.
                let test = record.tests[0].clone();
                let mut leaked = record.exposure.clone();
                leaked.tmatrix.insert(test.clone());
                ensure(check_hygiene(&leaked, &record.tests, &record.holdout).is_err(), || "leaked segment passed".into())?;
                ensure(!audit(&HygieneRecord { exposure: leaked, ..record.clone() }, rule).is_empty(), || "audit missed leak".into())?;
                let mut sibling = record.exposure.clone();
                sibling.lda.insert(SegmentKey {
                    labels: Labels::new(test.labels.subject_id.clone(), "other-session", test.labels.task_id.clone()),
                    start_ms: 0,
                    end_ms: 15_000,
                });
                ensure(check_hygiene(&sibling, &record.tests, &record.holdout).is_err(), || "withheld label passed".into())?;
                ensure(!audit(&HygieneRecord { exposure: sibling, ..record.clone() }, rule).is_empty(), || "audit missed label".into())?;
            }
        }
        notes.push(format!("{protocol}: {folds} clean folds"));
    }
    Ok(format!("{}; leaks injected into every fold were caught", notes.join(", ")))
}

// 10 -----------------------------------------------------------------------

fn c10_persistence() -> Outcome {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 10;
    cfg.ubm.gmm_mixtures = 8;
    cfg.ubm.baseline_mixtures = 4;
    cfg.ubm.modified_mixtures = 2;
    cfg.ivector.rank = 6;
    cfg.ivector.n_iters = 3;
    cfg.xvector.h1 = 12;
    cfg.xvector.h2 = 8;
    cfg.xvector.embed = 6;
    cfg.xvector.baseline_h1 = 12;
    cfg.xvector.baseline_h2 = 8;
    cfg.xvector.epochs = 3;
    let pools = small_corpus_pools(4, 60.0, &cfg);
    let train: Vec<&FeatureSegment> = pools.train.iter().collect();
    let val: Vec<&FeatureSegment> = pools.val.iter().collect();
    let test: Vec<&FeatureSegment> = pools.test[0].1.iter().collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let prov = Provenance::new(cfg.hash(), cfg.seed);
    let mut checked = Vec::new();
    for kind in SystemKind::ALL {
        let (system, _) = train_system(kind, &cfg, &train, &val).map_err(|e| format!("{kind}: {e}"))?;
        let enrollment = system.enroll(&train, EnrollMode::Mean).map_err(|e| format!("{kind}: {e}"))?;
        let before = system.score(&enrollment, &test).map_err(|e| format!("{kind}: {e}"))?;

        let sys_dir = dir.path().join(kind.name());
        std::fs::create_dir_all(&sys_dir).unwrap();
        system.save(&sys_dir, &prov).map_err(|e| format!("{kind}: {e}"))?;
        let enr_path = dir.path().join(format!("{}.enroll.csv", kind.name()));
        enrollment.save(&enr_path, &prov).map_err(|e| format!("{kind}: {e}"))?;
        let (loaded, lprov) = System::load(&sys_dir, &cfg).map_err(|e| format!("{kind}: {e}"))?;
        let (enr2, _) = Enrollment::load(&enr_path).map_err(|e| format!("{kind}: {e}"))?;
        ensure(lprov == prov, || format!("{kind}: provenance changed"))?;

        let after = loaded.score(&enr2, &test).map_err(|e| format!("{kind}: {e}"))?;
        let bits = |t: &ScoreTable| t.scores.iter().flatten().map(|s| s.to_bits()).collect::<Vec<u64>>();
        ensure(bits(&before) == bits(&after) && before == after, || format!("{kind}: scores changed after reload"))?;
        // Re-enrolling with the reloaded models must also be exact.
        let re = loaded.enroll(&train, EnrollMode::Mean).map_err(|e| format!("{kind}: {e}"))?;
        ensure(bits(&loaded.score(&re, &test).unwrap()) == bits(&before), || format!("{kind}: re-enrollment differs"))?;

        let csv = dir.path().join(format!("{}.scores.csv", kind.name()));
        before.save_csv(&csv, &prov).map_err(|e| e.to_string())?;
        let (back, _) = ScoreTable::load_csv(&csv).map_err(|e| e.to_string())?;
        ensure(bits(&back) == bits(&before), || format!("{kind}: score CSV is lossy"))?;
        checked.push(kind.name());
    }
    // Component files on their own.
    let lda_path = dir.path().join(SystemKind::Ix.name()).join(ixvector::systems::LDA_I_FILE);
    let lda = LdaModel::load(&lda_path).map_err(|e| e.to_string())?;
    let again = dir.path().join("copy.lda");
    lda.save(&again).map_err(|e| e.to_string())?;
    ensure(LdaModel::load(&again).unwrap() == lda, || "LDA file round trip differs".into())?;
    ensure(std::fs::read(&lda_path).unwrap() == std::fs::read(&again).unwrap(), || "LDA bytes differ".into())?;
    Ok(format!("{} systems: {}", checked.len(), checked.join(", ")))
}
