//! Acceptance gate: one test per release criterion, each printing a single
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines; any failure fails the build either way.

use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pam::accounting::{self, count_macs};
use pam::backbone::{build_model, BackboneConfig, GateMode, PlacementPlan};
use pam::blocks::{
    cam_forward, drm_forward, pam_forward, soft_gate, CamParams, CamVariant, DrmConv, GateConfig,
    PamParams,
};
use pam::gradsuite;
use pam::harness::data::{export_dataset, generate_dataset, YawLaw};
use pam::harness::eval::make_pairs;
use pam::harness::train::{metrics_csv, train, TrainConfig};
use pam::tensor::{add, batch_norm, conv2d, prelu, scale_per_sample, ConvSpec, Mode, Tensor};

// The criteria carry wall-clock budgets, so they must not time-share a core;
// each test serializes on this lock before starting its stopwatch.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn verdict(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

fn within_budget(name: &str, elapsed: Duration, budget: Duration) {
    verdict(
        &format!("{name} runtime"),
        elapsed <= budget,
        &format!("{:.2}s of {:.0}s budget", elapsed.as_secs_f64(), budget.as_secs_f64()),
    );
}

const REF_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const REF_EXTENTS: [usize; 4] = [56, 28, 14, 7];

#[test]
fn criterion_1_parameter_tables() {
    let _guard = serial();
    let t0 = Instant::now();
    let cases: [(&str, DrmConv, u64); 7] = [
        ("PAM12", DrmConv::Depthwise, 6_976),
        ("PAM34", DrmConv::Depthwise, 58_624),
        ("PAM1234", DrmConv::Depthwise, 65_600),
        ("PAM123", DrmConv::Depthwise, 21_056),
        ("PAM124", DrmConv::Depthwise, 51_520),
        ("PAM12", DrmConv::Dense, 372_160),
        ("PAM12", DrmConv::Depthwise, 6_976), // the published "-D" row
    ];
    for (text, conv, want) in cases {
        let plan = PlacementPlan::parse(text).unwrap();
        // placement_report instantiates real parameter arrays and counts them
        let got =
            accounting::placement_report(text, &REF_CHANNELS, &REF_EXTENTS, &plan.stages(), conv)
                .unwrap()
                .total_params();
        let label = match conv {
            DrmConv::Depthwise => text.to_string(),
            DrmConv::Dense => format!("{text}-C"),
        };
        verdict(
            &format!("table params {label}"),
            got == want,
            &format!("expected {want}, counted {got}"),
        );
    }
    let dream = accounting::dream_report(512).total_params();
    verdict("table params DREAM", dream == 525_312, &format!("expected 525312, counted {dream}"));
    within_budget("criterion 1", t0.elapsed(), Duration::from_secs(1));
}

#[test]
fn criterion_2_mac_ratio_law() {
    let _guard = serial();
    let t0 = Instant::now();
    for (&c, &e) in REF_CHANNELS.iter().zip(&REF_EXTENTS) {
        let depthwise = ConvSpec::depthwise(c, 3).padding(1);
        let standard = ConvSpec::new(c, c, 3).padding(1);
        let dw = count_macs(&depthwise, e, e).unwrap();
        let st = count_macs(&standard, e, e).unwrap();
        verdict(
            &format!("mac ratio C={c}"),
            st == dw * c as u64,
            &format!("standard {st}, depthwise {dw}, ratio {}", st as f64 / dw as f64),
        );
    }
    within_budget("criterion 2", t0.elapsed(), Duration::from_secs(1));
}

#[test]
fn criterion_3_gate_analytics() {
    let _guard = serial();
    let t0 = Instant::now();
    let cfg = GateConfig::default();
    let at45 = soft_gate(45.0, &cfg).unwrap();
    verdict("gate S(45)", (at45 - 0.5).abs() <= 1e-12, &format!("S(45) = {at45}"));
    let at90 = soft_gate(90.0, &cfg).unwrap();
    let want = 1.0 / (1.0 + (-10.0f64).exp());
    verdict("gate S(90)", (at90 - want).abs() <= 1e-12, &format!("S(90) = {at90} vs {want}"));
    let mut even = true;
    let mut monotone = true;
    let mut prev = soft_gate(0.0, &cfg).unwrap();
    for i in 1..=900 {
        let y = i as f64 * 0.1;
        let s = soft_gate(y, &cfg).unwrap();
        even &= s == soft_gate(-y, &cfg).unwrap();
        monotone &= s > prev;
        prev = s;
    }
    verdict("gate evenness", even, "S(-y) == S(y) on 0.1-degree grid");
    verdict("gate monotonicity", monotone, "strictly increasing on [0, 90] at 0.1-degree steps");
    within_budget("criterion 3", t0.elapsed(), Duration::from_secs(1));
}

#[test]
fn criterion_4_gradient_suite() {
    let _guard = serial();
    let t0 = Instant::now();
    let results = gradsuite::run("all", 0, 10).unwrap();
    for r in &results {
        verdict(
            &format!("gradients {}", r.name),
            r.max_rel_error <= 1e-5,
            &format!("max relative error {:.3e} over {} seeds", r.max_rel_error, r.seeds),
        );
    }
    within_budget("criterion 4", t0.elapsed(), Duration::from_secs(300));
}

#[test]
fn criterion_5_depthwise_equals_masked_dense() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst: f64 = 0.0;
    let shapes = 120;
    for _ in 0..shapes {
        let b = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=8);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let pad = rng.gen_range(0..=k / 2);
        let stride = rng.gen_range(1..=2);
        let h = rng.gen_range(k.max(3)..=10);
        let w = rng.gen_range(k.max(3)..=10);
        let x_data: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[b, c, h, w], x_data).unwrap();
        let dw_data: Vec<f64> = (0..c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dw_w = Tensor::from_vec(&[c, 1, k, k], dw_data.clone()).unwrap();
        // dense kernel with all cross-channel taps zeroed
        let mut dense = vec![0.0; c * c * k * k];
        for ch in 0..c {
            let src = &dw_data[ch * k * k..(ch + 1) * k * k];
            dense[(ch * c + ch) * k * k..(ch * c + ch) * k * k + k * k].copy_from_slice(src);
        }
        let dense_w = Tensor::from_vec(&[c, c, k, k], dense).unwrap();
        let dw_spec = ConvSpec::depthwise(c, k).stride(stride).padding(pad);
        let dense_spec = ConvSpec::new(c, c, k).stride(stride).padding(pad);
        let a = conv2d(&x, &dw_w, None, &dw_spec).unwrap();
        let bb = conv2d(&x, &dense_w, None, &dense_spec).unwrap();
        assert_eq!(a.shape(), bb.shape());
        for (p, q) in a.to_vec().iter().zip(bb.to_vec()) {
            worst = worst.max((p - q).abs());
        }
    }
    verdict(
        "depthwise vs channel-masked dense",
        worst <= 1e-10,
        &format!("max abs deviation {worst:.3e} over {shapes} random shapes"),
    );
    within_budget("criterion 5", t0.elapsed(), Duration::from_secs(60));
}

#[test]
fn criterion_6_structural_identities() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let c = 16;
    let p = PamParams::new(c, &mut rng).unwrap();
    let x_data: Vec<f64> = (0..2 * c * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(&[2, c, 6, 6], x_data).unwrap();

    let zero = pam_forward(&x, &p, &[0.0, 0.0], Mode::Eval).unwrap();
    let cam_only = cam_forward(&x, &p.cam).unwrap();
    verdict(
        "gate=0 collapses PAM to CAM",
        zero.to_vec() == cam_only.to_vec(),
        "elementwise equal",
    );

    // gate=1 must reproduce the ungated residual design: the branch assembled
    // by hand from the same parameters, added to the input, then CAM
    let spec = ConvSpec::depthwise(c, 3).padding(1);
    let h = batch_norm(&x, &p.drm.bn1, Mode::Eval).unwrap();
    let h = conv2d(&h, &p.drm.conv1_w, None, &spec).unwrap();
    let h = prelu(&h, &p.drm.prelu_slopes).unwrap();
    let h = conv2d(&h, &p.drm.conv2_w, None, &spec).unwrap();
    let h = batch_norm(&h, &p.drm.bn2, Mode::Eval).unwrap();
    let manual = cam_forward(&add(&x, &h).unwrap(), &p.cam).unwrap();
    let one = pam_forward(&x, &p, &[1.0, 1.0], Mode::Eval).unwrap();
    let dev = one
        .to_vec()
        .iter()
        .zip(manual.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    verdict(
        "gate=1 is the ungated residual variant",
        dev <= 1e-12,
        &format!("max abs deviation {dev:.3e} from hand-assembled branch"),
    );

    // scale_per_sample with explicit ones must also agree exactly
    let branch = drm_forward(&x, &p.drm, &[1.0, 1.0], Mode::Eval).unwrap();
    let scaled = scale_per_sample(&h, &[1.0, 1.0]).unwrap();
    let resid = add(&x, &scaled).unwrap();
    verdict(
        "unit gate scaling is exact",
        branch.to_vec() == resid.to_vec(),
        "per-sample scale by 1.0 changes nothing",
    );

    let cam_plain = CamParams::new(c, CamVariant::Cbam, false, 4, &mut rng).unwrap();
    let y = cam_forward(&x, &cam_plain).unwrap();
    let bounded = y
        .to_vec()
        .iter()
        .zip(x.to_vec())
        .all(|(a, b)| a.abs() <= b.abs() + 1e-15);
    verdict(
        "CAM without identity is contractive",
        bounded,
        "output bounded elementwise by input",
    );

    // with identity mapping the bound must be violable (negative control)
    let cam_id = CamParams::new(c, CamVariant::Cbam, true, 4, &mut rng).unwrap();
    let y_id = cam_forward(&x, &cam_id).unwrap();
    let violated = y_id
        .to_vec()
        .iter()
        .zip(x.to_vec())
        .any(|(a, b)| a.abs() > b.abs() + 1e-15);
    verdict(
        "identity mapping breaks the bound",
        violated,
        "residual CAM exceeds the input somewhere",
    );
}

struct AblationArm {
    label: &'static str,
    placement: &'static str,
    gate_mode: GateMode,
    high_yaw: Vec<f64>,
}

#[test]
fn criterion_7_toy_gate_ablation() {
    let _guard = serial();
    let cfg = TrainConfig { epochs: 6, ..TrainConfig::default() };
    let ds = generate_dataset(1, 20, 50, YawLaw::FrontalSkewed, 32);
    let eval_ds = generate_dataset(2, 20, 10, YawLaw::Uniform, 32);
    let pairs = make_pairs(&eval_ds, 400, 2).unwrap();
    let mut arms = [
        AblationArm {
            label: "PAM gate",
            placement: "PAM12",
            gate_mode: GateMode::Yaw,
            high_yaw: vec![],
        },
        AblationArm {
            label: "PAM fixed-1",
            placement: "PAM12",
            gate_mode: GateMode::FixedOne,
            high_yaw: vec![],
        },
        AblationArm {
            label: "baseline",
            placement: "baseline",
            gate_mode: GateMode::Yaw,
            high_yaw: vec![],
        },
    ];
    for seed in 0..3u64 {
        for arm in &mut arms {
            let t0 = Instant::now();
            let plan = PlacementPlan::parse(arm.placement).unwrap();
            let mut model = build_model(&BackboneConfig::toy(), &plan, seed).unwrap();
            model.gate_mode = arm.gate_mode;
            let outcome = train(&model, &ds, &pairs, &cfg).unwrap();
            let last = outcome.history.last().unwrap();
            println!(
                "  ablation seed {seed} {:<11}: acc {:.4}, high-yaw {:.4} ({:.0}s)",
                arm.label,
                last.accuracy,
                last.bucket_accuracy[2],
                t0.elapsed().as_secs_f64()
            );
            arm.high_yaw.push(last.bucket_accuracy[2]);
            within_budget("criterion 7 single run", t0.elapsed(), Duration::from_secs(600));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let gate = mean(&arms[0].high_yaw);
    let fixed = mean(&arms[1].high_yaw);
    let base = mean(&arms[2].high_yaw);
    let spread = std(&arms[0].high_yaw).max(std(&arms[2].high_yaw));
    println!(
        "  ablation means: gate {gate:.4}, fixed-1 {fixed:.4}, baseline {base:.4}, max std {spread:.4}"
    );
    verdict(
        "ablation ordering gate >= fixed-1",
        gate >= fixed,
        &format!("{gate:.4} vs {fixed:.4}"),
    );
    verdict(
        "ablation ordering fixed-1 >= baseline",
        fixed >= base,
        &format!("{fixed:.4} vs {base:.4}"),
    );
    verdict(
        "ablation margin beats seed noise",
        gate - base > spread,
        &format!("margin {:.4} vs across-seed std {spread:.4}", gate - base),
    );
}

#[test]
fn criterion_8_determinism() {
    let _guard = serial();
    // datasets: bitwise-identical export bytes
    let dir = std::env::temp_dir().join(format!("pam-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut exports = Vec::new();
    for run in 0..2 {
        let ds = generate_dataset(7, 6, 8, YawLaw::FrontalSkewed, 32);
        let bin = dir.join(format!("ds{run}.bin"));
        let man = dir.join(format!("ds{run}.txt"));
        export_dataset(&ds, &bin, &man).unwrap();
        exports.push((std::fs::read(&bin).unwrap(), std::fs::read(&man).unwrap()));
    }
    verdict(
        "determinism: dataset bytes",
        exports[0] == exports[1],
        "two generations with seed 7 export identical files",
    );

    // parameters: bitwise-identical initializations
    let plan = PlacementPlan::parse("PAM12").unwrap();
    let m1 = build_model(&BackboneConfig::toy(), &plan, 11).unwrap();
    let m2 = build_model(&BackboneConfig::toy(), &plan, 11).unwrap();
    let p1: Vec<Vec<f64>> = m1.named_params().iter().map(|(_, t)| t.to_vec()).collect();
    let p2: Vec<Vec<f64>> = m2.named_params().iter().map(|(_, t)| t.to_vec()).collect();
    verdict(
        "determinism: parameters",
        p1 == p2,
        "two builds with seed 11 initialize identically",
    );

    // metrics CSVs: identical across two short training runs
    let ds = generate_dataset(21, 4, 6, YawLaw::FrontalSkewed, 32);
    let pairs = make_pairs(&ds, 12, 3).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
    let csvs: Vec<String> = (0..2)
        .map(|_| {
            let m = build_model(&BackboneConfig::toy(), &plan, 11).unwrap();
            metrics_csv(&train(&m, &ds, &pairs, &cfg).unwrap().history)
        })
        .collect();
    verdict(
        "determinism: metrics CSV",
        csvs[0] == csvs[1],
        "two trainings with equal seeds emit identical CSVs",
    );
    std::fs::remove_dir_all(&dir).ok();
}
