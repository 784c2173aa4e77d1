//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line for its
//! criterion and then asserts it. The line goes straight to stderr so that
//! it shows without `--nocapture`.

use std::f64::consts::LN_2;
use std::io::Write;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semisup::augment::{apply_cutmix, mix_pseudolabels, sample_cutmix_mask};
use semisup::bounds::{
    avg_nll_mc, conditional_entropy_exact, cross_entropy, entropy, jsd_exact, jsd_lower_bound,
    tempered_argmin_argmax, random_conditional, random_discriminator, random_joint, DiscreteConditional,
};
use semisup::config::{RunConfig, DESK_CONFIG};
use semisup::data::Image;
use semisup::matrix::Matrix;
use semisup::metrics::write_metrics_csv;
use semisup::model::{ema_update, init_params, ArchSpec, Logits, Probabilities};
use semisup::objective::{
    contrastive_lower_loss, cutmix_loss, one_hot_targets, pseudo_supervised_loss, supervised_loss,
};
use semisup::threshold::{adaptive_mask, fixed_mask, make_pseudolabels, Mask, ThresholdMode, ThresholdState};
use semisup::trainer::{run_training, NoObserver, TrainData, Trainer};

fn report(criterion: u32, passed: bool, detail: impl AsRef<str>) {
    let _ = writeln!(
        std::io::stderr(),
        "[{}] criterion {criterion}: {}",
        if passed { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xacce_0000 + tag)
}

fn random_matrix(r: &mut impl Rng, n: usize, k: usize, scale: f64) -> Matrix {
    Matrix::from_vec(n, k, (0..n * k).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Worst relative error between an analytic gradient and central
/// differences of `f` around `z`.
fn fd_check(z: &Matrix, grad: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for idx in 0..z.as_slice().len() {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp.as_mut_slice()[idx] += h;
        zm.as_mut_slice()[idx] -= h;
        let num = (f(&zp) - f(&zm)) / (2.0 * h);
        let ana = grad.as_slice()[idx];
        let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn criterion_01_gradient_oracle() {
    let mut r = rng(1);
    let mut worst = [0.0f64; 4];
    for _ in 0..20 {
        let n = r.random_range(1..=4);
        let k = r.random_range(2..=3);
        let z1 = random_matrix(&mut r, n, k, 3.0);
        let z2 = random_matrix(&mut r, n, k, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let t = one_hot_targets(&labels, k).unwrap();

        let g = supervised_loss(&Logits(z1.clone()), &t).unwrap().grad;
        worst[0] = worst[0].max(fd_check(&z1, &g, |z| supervised_loss(&Logits(z.clone()), &t).unwrap().value));

        let phat = make_pseudolabels(&semisup::model::softmax(&Logits(z2.clone())));
        let mask = Mask::from_gates((0..n).map(|_| r.random_bool(0.7)).collect(), k);
        let p = pseudo_supervised_loss(&Logits(z1.clone()), &Logits(z2.clone()), &phat, &mask).unwrap();
        let pl = |a: &Matrix, b: &Matrix| pseudo_supervised_loss(&Logits(a.clone()), &Logits(b.clone()), &phat, &mask).unwrap().value;
        worst[1] = worst[1]
            .max(fd_check(&z1, &p.grad1, |z| pl(z, &z2)))
            .max(fd_check(&z2, &p.grad2, |z| pl(&z1, z)));

        let eta = r.random_range(0.0..1.0);
        let mut mixed = Matrix::zeros(n, k);
        for i in 0..n {
            let j = (i + 1) % n;
            let row = mix_pseudolabels(phat.0.row(i), phat.0.row(j), &mask.row(i), &mask.row(j), eta);
            mixed.row_mut(i).copy_from_slice(&row);
        }
        let g = cutmix_loss(&Logits(z1.clone()), &mixed).unwrap().grad;
        worst[2] = worst[2].max(fd_check(&z1, &g, |z| cutmix_loss(&Logits(z.clone()), &mixed).unwrap().value));

        let c = contrastive_lower_loss(&z1, &z2).unwrap();
        worst[3] = worst[3]
            .max(fd_check(&z1, &c.grad1, |z| contrastive_lower_loss(z, &z2).unwrap().value))
            .max(fd_check(&z2, &c.grad2, |z| contrastive_lower_loss(&z1, z).unwrap().value));
    }
    let ok = worst.iter().all(|&w| w <= 1e-4);
    report(
        1,
        ok,
        format!(
            "20 draws, worst relative FD error sup {:.2e} pseudo {:.2e} cutmix {:.2e} lower {:.2e} (tol 1e-4)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_02_entropy_nll() {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for i in 0..5 {
        let dc = random_conditional(&mut r, 6, 4).unwrap();
        let h = conditional_entropy_exact(&dc);
        let mc = avg_nll_mc(&dc, &dc, 100_000, 1000 + i).unwrap();
        assert!(!mc.infinite);
        worst = worst.max((mc.mean - h).abs() / h);
    }
    let ok = worst <= 0.02;
    report(2, ok, format!("5 instances, n=1e5, worst relative gap {worst:.4} (tol 0.02)"));
    assert!(ok);
}

#[test]
fn criterion_03_upper_bound() {
    let mut r = rng(3);
    let (mut gibbs, mut equality, mut lemma) = (true, true, true);
    let mut min_gap = f64::INFINITY;
    let temps: Vec<f64> = (1..=30).map(|i| f64::from(i) / 10.0).collect();
    for _ in 0..50 {
        let dc = random_conditional(&mut r, 1, 4).unwrap();
        let p = dc.pcx().row(0).to_vec();
        let other = random_conditional(&mut r, 1, 4).unwrap();
        let s = other.pcx().row(0);
        let gap = cross_entropy(&p, s) - entropy(&p);
        min_gap = min_gap.min(gap);
        gibbs &= gap > 0.0;
        equality &= (cross_entropy(&p, &p) - entropy(&p)).abs() < 1e-12;
        let multi: DiscreteConditional = random_conditional(&mut r, 3, 4).unwrap();
        for d in [&dc, &multi] {
            let (amin, amax) = tempered_argmin_argmax(d, &temps).unwrap();
            lemma &= amin == amax && temps[amin] == 1.0;
        }
    }
    let ok = gibbs && equality && lemma;
    report(
        3,
        ok,
        format!("50 pairs: CE > H (min gap {min_gap:.3e}), CE = H at sigma = p, grid argmin CE = argmax likelihood at t = 1: {lemma}"),
    );
    assert!(ok);
}

#[test]
fn criterion_04_lower_bound() {
    let mut r = rng(4);
    let (mut loose, mut tight) = (true, true);
    let mut max_slack = f64::NEG_INFINITY;
    for _ in 0..10 {
        let j = random_joint(&mut r, 4, 4).unwrap();
        let jsd = jsd_exact(&j);
        for _ in 0..100 {
            let d = random_discriminator(&mut r, 4, 4);
            let v = jsd_lower_bound(&j, &d).unwrap();
            loose &= v <= jsd;
            tight &= v <= 2.0 * jsd - 2.0 * LN_2;
            max_slack = max_slack.max(v - (2.0 * jsd - 2.0 * LN_2));
        }
    }
    let ok = loose && tight;
    report(
        4,
        ok,
        format!("1000 discriminators on 10 joints: <= JSD {loose}, <= 2 JSD - 2 ln 2 {tight} (max margin {max_slack:.3e})"),
    );
    assert!(ok);
}

#[test]
fn criterion_05_cutmix_invariants() {
    let mut r = rng(5);
    let (mut eta_ok, mut pixel_ok, mut mass_ok) = (true, true, true);
    for _ in 0..1000 {
        let h = r.random_range(1..=10);
        let w = r.random_range(1..=10);
        let alpha = r.random_range(0.1..3.0);
        let (mask, eta) = sample_cutmix_mask(h, w, alpha, &mut r).unwrap();
        eta_ok &= eta == mask.mean();
        let img = |r: &mut ChaCha8Rng| Image::new(h, w, 2, (0..h * w * 2).map(|_| r.random::<f32>()).collect()).unwrap();
        let batch = vec![img(&mut r), img(&mut r)];
        let (m2, _) = sample_cutmix_mask(h, w, alpha, &mut r).unwrap();
        let out = apply_cutmix(&batch, &[1, 0], &[mask.clone(), m2]).unwrap();
        for (p, (&a, &b)) in out[0].data().iter().zip(batch[0].data().iter().zip(batch[1].data())) {
            pixel_ok &= *p == a || *p == b;
        }
        let k = 3;
        let (ci, cr) = (r.random_range(0..k), r.random_range(0..k));
        let (mi, mr) = (f64::from(u8::from(r.random_bool(0.5))), f64::from(u8::from(r.random_bool(0.5))));
        let mut pi = vec![0.0; k];
        let mut pr = vec![0.0; k];
        pi[ci] = 1.0;
        pr[cr] = 1.0;
        let mixed = mix_pseudolabels(&pi, &pr, &vec![mi; k], &vec![mr; k], eta);
        let sum: f64 = mixed.iter().sum();
        mass_ok &= (sum - (eta * mi + (1.0 - eta) * mr)).abs() < 1e-15;
    }
    let ok = eta_ok && pixel_ok && mass_ok;
    report(
        5,
        ok,
        format!("1000 cases: eta = mask mean {eta_ok}, pixels from a source {pixel_ok}, label mass {mass_ok}"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_threshold_invariants() {
    let mut r = rng(6);
    let mut monotone = true;
    let mut bounded = true;
    for _ in 0..200 {
        let n = r.random_range(1..8);
        let k = r.random_range(2..6);
        let y = Probabilities(semisup::model::softmax(&Logits(random_matrix(&mut r, n, k, 4.0))).0);
        let (t1, t2) = {
            let a = r.random_range(0.0..1.0);
            let b = r.random_range(0.0..1.0);
            (f64::min(a, b), f64::max(a, b))
        };
        let lo = fixed_mask(&y, t1);
        let hi = fixed_mask(&y, t2);
        monotone &= hi.gates().iter().zip(lo.gates()).all(|(&h, &l)| !h || l);
        let mut st = ThresholdState::new(ThresholdMode::Adaptive, k, r.random_range(0.0..1.0), 0.95).unwrap();
        st.tau = r.random_range(0.0..1.0);
        st.ptilde = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
        let st = semisup::threshold::update_adaptive_state(&st, &y).unwrap();
        bounded &= st.class_thresholds().iter().all(|&t| (0.0..=st.tau + 1e-15).contains(&t));
        let _ = adaptive_mask(&st, &y).unwrap();
    }
    let mut st = ThresholdState::new(ThresholdMode::Adaptive, 2, 0.999, 0.95).unwrap();
    st.tau = 0.5;
    let y = Probabilities(Matrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap());
    let tau1 = semisup::threshold::update_adaptive_state(&st, &y).unwrap().tau;
    let arith = (tau1 - 0.5004).abs() < 1e-12;
    let ok = monotone && bounded && arith;
    report(
        6,
        ok,
        format!("monotone in tau {monotone}, class thresholds in [0, tau] {bounded}, tau' = {tau1:.10} (expect 0.5004)"),
    );
    assert!(ok);
}

fn small_config(extra: &[&str]) -> RunConfig {
    let text = r#"
seed = 11
[data]
source = "synthetic"
labels_per_class = 3
test_per_class = 20
[data.synthetic]
class_count = 3
per_class = 40
noise = 0.3
max_shift = 1
seed = 2
[model]
conv_channels = [6, 8]
[train]
total_steps = 100
labeled_batch = 6
unlabeled_batch = 12
log_interval = 10
"#;
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_str(text, &overrides).unwrap()
}

#[test]
fn criterion_07_reduction_to_supervised() {
    let masked = small_config(&[
        "objective.lambda=0",
        "threshold.mode=\"fixed\"",
        "threshold.fixed_value=1.0",
    ]);
    let baseline = small_config(&[
        "objective.use_pseudo=false",
        "objective.use_cutmix=false",
        "objective.use_lower=false",
    ]);
    let data = TrainData::from_config(&masked).unwrap();
    let mut a = Trainer::new(masked, data.clone(), None).unwrap();
    let mut b = Trainer::new(baseline, data, None).unwrap();
    let mut identical = true;
    let mut masked_rows = 0.0;
    for _ in 0..100 {
        a.step(&mut NoObserver).unwrap();
        b.step(&mut NoObserver).unwrap();
        identical &= a.state().params == b.state().params && a.state().ema == b.state().ema;
    }
    for row in a.rows() {
        masked_rows += row.mask_rate;
    }
    let ok = identical && masked_rows == 0.0;
    report(
        7,
        ok,
        format!("lambda = 0, all unlabeled rows masked: 100-step trajectory bit-identical to supervised-only: {identical}"),
    );
    assert!(ok);
}

#[test]
fn criterion_08_determinism_and_resume() {
    let cfg = small_config(&["train.total_steps=60", "train.checkpoint_interval=30"]);
    let data = TrainData::from_config(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = |name: &str, rows: &[semisup::metrics::MetricsRow]| {
        let p = dir.path().join(name);
        write_metrics_csv(rows, &p).unwrap();
        std::fs::read(p).unwrap()
    };
    let run1 = run_training(&cfg, &data, None, &mut NoObserver).unwrap();
    let run2 = run_training(&cfg, &data, None, &mut NoObserver).unwrap();
    let same_csv = csv("a.csv", &run1.rows) == csv("b.csv", &run2.rows);

    let ckpt_dir = dir.path().join("ckpt");
    std::fs::create_dir_all(&ckpt_dir).unwrap();
    let mut writer = semisup::trainer::CheckpointWriter { dir: &ckpt_dir };
    let mut first = Trainer::new(cfg.clone(), data.clone(), None).unwrap();
    while first.state().step < 30 {
        first.step(&mut writer).unwrap();
    }
    let mid = semisup::checkpoint::load_checkpoint(ckpt_dir.join("latest.bin")).unwrap();
    let resumed = run_training(&cfg, &data, Some(mid), &mut NoObserver).unwrap();
    let final_same = resumed.state == run1.state && resumed.rows.last() == run1.rows.last();
    let ok = same_csv && final_same;
    report(
        8,
        ok,
        format!("same seed gives identical metrics CSV {same_csv}; resume at step 30 gives identical final state/metrics {final_same}"),
    );
    assert!(ok);
}

struct DeskRun {
    err: f64,
    final_quarter_mask: f64,
}

struct DeskResults {
    sup: Vec<DeskRun>,
    full: Vec<DeskRun>,
    no_lower: Vec<DeskRun>,
    no_cutmix: Vec<DeskRun>,
}

const DESK_SEEDS: [u64; 3] = [0, 1, 2];

fn desk_run(seed: u64, extra: &[&str]) -> DeskRun {
    let mut overrides = vec![format!("seed={seed}")];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    let cfg = RunConfig::from_toml_str(DESK_CONFIG, &overrides).unwrap();
    let data = TrainData::from_config(&cfg).unwrap();
    let out = run_training(&cfg, &data, None, &mut NoObserver).unwrap();
    let test = data.test.as_ref().unwrap();
    let err = semisup::trainer::evaluate(&out.state.ema, test, cfg.train.eval_batch, 1).unwrap().0;
    let final_quarter_mask =
        semisup::cli::final_quarter_mask_rate(&out.rows, cfg.train.total_steps).unwrap_or(0.0);
    DeskRun { err, final_quarter_mask }
}

fn desk_results() -> &'static DeskResults {
    static CELL: OnceLock<DeskResults> = OnceLock::new();
    CELL.get_or_init(|| {
        let each = |extra: &[&str]| DESK_SEEDS.iter().map(|&s| desk_run(s, extra)).collect::<Vec<_>>();
        DeskResults {
            sup: each(&["objective.use_pseudo=false", "objective.use_cutmix=false", "objective.use_lower=false"]),
            full: each(&[]),
            no_lower: each(&["objective.use_lower=false"]),
            no_cutmix: each(&["objective.use_cutmix=false"]),
        }
    })
}

fn mean_err(runs: &[DeskRun]) -> f64 {
    runs.iter().map(|r| r.err).sum::<f64>() / runs.len() as f64
}

fn errs(runs: &[DeskRun]) -> String {
    runs.iter().map(|r| format!("{:.4}", r.err)).collect::<Vec<_>>().join("/")
}

#[test]
fn criterion_09_desk_efficacy() {
    let r = desk_results();
    let (sup, full, nl, nc) = (mean_err(&r.sup), mean_err(&r.full), mean_err(&r.no_lower), mean_err(&r.no_cutmix));
    let gap_ok = sup - full >= 0.05;
    let lower_ok = nl > full;
    let cutmix_ok = nc > full;
    let ok = gap_ok && lower_ok && cutmix_ok;
    report(
        9,
        ok,
        format!(
            "mean top-1 error over 3 seeds: supervised {sup:.4} [{}], full {full:.4} [{}], no l_lower {nl:.4} [{}], no l_cutmix {nc:.4} [{}]; gap >= 0.05 {gap_ok}, ablations worse {lower_ok}/{cutmix_ok}",
            errs(&r.sup),
            errs(&r.full),
            errs(&r.no_lower),
            errs(&r.no_cutmix)
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_utilization_trend() {
    let r = desk_results();
    let rates: Vec<f64> = r.full.iter().map(|x| x.final_quarter_mask).collect();
    let passing = rates.iter().filter(|&&m| m > 0.9).count();
    let ok = passing >= 2;
    report(
        10,
        ok,
        format!(
            "final-quarter mean mask_rate per seed {:?}; {passing}/3 above 0.9 (need 2)",
            rates.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_11_ema_closed_form() {
    let arch = ArchSpec::small_cnn(3, 4, 4, vec![3], 2);
    let mut params = init_params(&arch, 0).unwrap();
    let mut shadow = params.clone();
    for b in &mut shadow.blocks {
        b.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let d = 0.999f64;
    let mut exact: Vec<f64> = vec![0.0; params.len()];
    for t in 0..1000u32 {
        let mut k = 0;
        for b in &mut params.blocks {
            for (j, v) in b.data.iter_mut().enumerate() {
                *v = (f64::from(t) * 0.013 + j as f64).sin() as f32;
                exact[k] = d * exact[k] + (1.0 - d) * f64::from(*v);
                k += 1;
            }
        }
        ema_update(&mut shadow, &params, d).unwrap();
    }
    let got: Vec<f64> = shadow.blocks.iter().flat_map(|b| b.data.iter().map(|&v| f64::from(v))).collect();
    let worst_varying = got.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Identical updates: shadow = (1 - d^t) * theta from zero.
    let mut shadow = params.zeros_like();
    for _ in 0..1000 {
        ema_update(&mut shadow, &params, d).unwrap();
    }
    let w = 1.0 - d.powi(1000);
    let worst_const = shadow
        .blocks
        .iter()
        .zip(&params.blocks)
        .flat_map(|(s, p)| s.data.iter().zip(&p.data).map(move |(&a, &b)| (f64::from(a) - w * f64::from(b)).abs()))
        .fold(0.0, f64::max);
    let ok = worst_varying <= 1e-6 && worst_const <= 1e-6;
    report(
        11,
        ok,
        format!("1000 updates at decay 0.999: worst deviation identical updates {worst_const:.2e}, varying {worst_varying:.2e} (tol 1e-6)"),
    );
    assert!(ok);
}
