use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pam::accounting::{self, CostReport};
use pam::backbone::{build_model, load_checkpoint, save_checkpoint, PlacementPlan};
use pam::blocks::{soft_gate, DrmConv, GateConfig};
use pam::config::RunConfig;
use pam::harness::{self, data, eval};
use pam::Error;

#[derive(Parser)]
#[command(name = "pam", about = "Pose attention blocks: accounting, gate analytics, gradient checks, training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvKind {
    Depthwise,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Reference,
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter cost of PAM placement plans
    Params {
        /// Placement texts, e.g. PAM12 PAM34 baseline
        placements: Vec<String>,
        #[arg(long, value_enum, default_value_t = Profile::Reference)]
        profile: Profile,
        #[arg(long, value_enum, default_value_t = ConvKind::Depthwise)]
        conv: ConvKind,
        /// Assert the eight published table integers and exit nonzero on mismatch
        #[arg(long)]
        check_paper: bool,
    },
    /// Emit the yaw coefficient curve as CSV
    GateCurve {
        #[arg(long, default_value_t = 10.0)]
        k: f64,
        #[arg(long, default_value_t = 1.0)]
        step_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// primitive | drm | cam | pam | dream | loss | all
        #[arg(default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy profile from a run config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Write the complete default config to this path and exit
        #[arg(long)]
        write_default: bool,
    },
    /// Evaluate a checkpoint on freshly generated verification pairs
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare parameter costs of several placement plans against a baseline
    Compare {
        placements: Vec<String>,
        #[arg(long, value_enum, default_value_t = Profile::Reference)]
        profile: Profile,
    },
}

fn profile_dims(profile: Profile) -> ([usize; 4], [usize; 4]) {
    match profile {
        Profile::Reference => ([64, 128, 256, 512], [56, 28, 14, 7]),
        Profile::Toy => ([8, 16, 32, 64], [32, 16, 8, 4]),
    }
}

fn placement_reports(
    placements: &[String],
    profile: Profile,
    conv: DrmConv,
) -> Result<Vec<CostReport>, Error> {
    let (channels, extents) = profile_dims(profile);
    let mut reports = Vec::new();
    for text in placements {
        let plan = PlacementPlan::parse(text)?;
        reports.push(accounting::placement_report(text, &channels, &extents, &plan.stages(), conv)?);
    }
    Ok(reports)
}

fn cmd_params(
    placements: &[String],
    profile: Profile,
    conv: ConvKind,
    check_paper: bool,
) -> Result<bool, Error> {
    let conv = match conv {
        ConvKind::Depthwise => DrmConv::Depthwise,
        ConvKind::Dense => DrmConv::Dense,
    };
    let reports = placement_reports(placements, profile, conv)?;
    for r in &reports {
        print!("{}", r.render_records());
    }
    if !check_paper {
        return Ok(true);
    }
    // published deltas at the reference profile
    let (channels, extents) = profile_dims(Profile::Reference);
    let expected: [(&str, DrmConv, u64); 7] = [
        ("PAM12", DrmConv::Depthwise, 6_976),
        ("PAM34", DrmConv::Depthwise, 58_624),
        ("PAM1234", DrmConv::Depthwise, 65_600),
        ("PAM123", DrmConv::Depthwise, 21_056),
        ("PAM124", DrmConv::Depthwise, 51_520),
        ("PAM12", DrmConv::Dense, 372_160),
        ("PAM12", DrmConv::Depthwise, 6_976), // the "-D" row coincides with the default design
    ];
    let mut ok = true;
    for (text, conv, want) in expected {
        let plan = PlacementPlan::parse(text)?;
        let got = accounting::placement_report(text, &channels, &extents, &plan.stages(), conv)?
            .total_params();
        let label = match conv {
            DrmConv::Depthwise => format!("{text}"),
            DrmConv::Dense => format!("{text}-C"),
        };
        let status = if got == want { "ok" } else { "MISMATCH" };
        println!("check {label}: expected {want}, counted {got} [{status}]");
        ok &= got == want;
    }
    let dream = accounting::dream_report(512).total_params();
    let status = if dream == 525_312 { "ok" } else { "MISMATCH" };
    println!("check DREAM(512): expected 525312, counted {dream} [{status}]");
    ok &= dream == 525_312;
    Ok(ok)
}

fn cmd_gate_curve(k: f64, step_deg: f64, out: &PathBuf) -> Result<(), Error> {
    if step_deg <= 0.0 {
        return Err(Error::Invalid("step must be positive".into()));
    }
    let cfg = GateConfig { k_slope: k, ..GateConfig::default() };
    let mut csv = String::from("yaw,coefficient\n");
    let mut yaw: f64 = -90.0;
    while yaw <= 90.0 + 1e-9 {
        let y = yaw.min(90.0);
        csv.push_str(&format!("{y:.6},{:.12e}\n", soft_gate(y, &cfg)?));
        yaw += step_deg;
    }
    std::fs::write(out, csv)?;
    println!("wrote gate curve to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(target: &str, seed: u64) -> Result<bool, Error> {
    let known = ["primitive", "drm", "cam", "pam", "dream", "loss", "all"];
    if !known.contains(&target) {
        return Err(Error::Invalid(format!(
            "unknown gradcheck target '{target}' (expected one of {known:?})"
        )));
    }
    let results = pam::gradsuite::run(target, seed, 3)?;
    let mut ok = true;
    for r in &results {
        let status = if r.max_rel_error <= 1e-5 { "ok" } else { "FAIL" };
        println!("gradcheck {:<28} max_rel_err {:.3e} [{status}]", r.name, r.max_rel_error);
        ok &= r.max_rel_error <= 1e-5;
    }
    Ok(ok)
}

fn cmd_train(config_path: &PathBuf, write_default: bool) -> Result<(), Error> {
    if write_default {
        std::fs::write(config_path, RunConfig::default().to_toml())?;
        println!("wrote default config to {}", config_path.display());
        return Ok(());
    }
    let cfg = RunConfig::load(config_path)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let plan = cfg.plan()?;
    let mut model = build_model(&cfg.backbone, &plan, cfg.model_seed)?;
    model.gate_mode = cfg.gate_mode;
    model.gate_cfg.k_slope = cfg.gate_k_slope;

    let ds = data::generate_dataset(
        cfg.dataset.seed,
        cfg.dataset.n_identities,
        cfg.dataset.n_per_identity,
        cfg.dataset.yaw_law,
        cfg.backbone.input_size,
    );
    let eval_ds = data::generate_dataset(
        cfg.dataset.eval_seed,
        cfg.dataset.n_identities,
        cfg.dataset.n_per_identity.min(10),
        data::YawLaw::Uniform,
        cfg.backbone.input_size,
    );
    let pairs = eval::make_pairs(&eval_ds, cfg.dataset.eval_pairs, cfg.dataset.eval_seed)?;
    let outcome = harness::train(&model, &ds, &pairs, &cfg.train)?;

    let csv = harness::metrics_csv(&outcome.history);
    std::fs::write(cfg.output_dir.join("metrics.csv"), &csv)?;
    save_checkpoint(&model, &cfg.output_dir.join("model.ckpt"))?;
    std::fs::write(cfg.output_dir.join("resolved-config.toml"), cfg.to_toml())?;
    if let Some(last) = outcome.history.last() {
        println!(
            "final epoch {}: loss {:.6}, acc {:.4}, buckets [{:.4}, {:.4}, {:.4}]",
            last.epoch,
            last.loss,
            last.accuracy,
            last.bucket_accuracy[0],
            last.bucket_accuracy[1],
            last.bucket_accuracy[2]
        );
    }
    println!("artifacts written to {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_eval(checkpoint: &PathBuf, config_path: &PathBuf) -> Result<(), Error> {
    let cfg = RunConfig::load(config_path)?;
    let model = load_checkpoint(checkpoint)?;
    let eval_ds = data::generate_dataset(
        cfg.dataset.eval_seed,
        cfg.dataset.n_identities,
        cfg.dataset.n_per_identity.min(10),
        data::YawLaw::Uniform,
        model.cfg.input_size,
    );
    let pairs = eval::make_pairs(&eval_ds, cfg.dataset.eval_pairs, cfg.dataset.eval_seed)?;
    let report = eval::evaluate_verification(&model, &pairs)?;
    println!("pairs {}", report.n_pairs);
    println!("accuracy {:.12e}", report.accuracy);
    println!(
        "acc_y0_30 {:.12e}\nacc_y30_60 {:.12e}\nacc_y60_90 {:.12e}",
        report.bucket_accuracy[0], report.bucket_accuracy[1], report.bucket_accuracy[2]
    );
    Ok(())
}

fn cmd_compare(placements: &[String], profile: Profile) -> Result<(), Error> {
    if placements.len() < 2 {
        return Err(Error::Invalid("compare needs at least two placements".into()));
    }
    let reports = placement_reports(placements, profile, DrmConv::Depthwise)?;
    let table = accounting::compare(&reports, &placements[0])?;
    print!("{table}");
    Ok(())
}

fn usage_error(e: &Error) -> bool {
    matches!(e, Error::Invalid(_) | Error::Config(_))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<bool, Error> = match &cli.command {
        Command::Params { placements, profile, conv, check_paper } => {
            cmd_params(placements, *profile, *conv, *check_paper)
        }
        Command::GateCurve { k, step_deg, out } => cmd_gate_curve(*k, *step_deg, out).map(|_| true),
        Command::Gradcheck { target, seed } => cmd_gradcheck(target, *seed),
        Command::Train { config, write_default } => cmd_train(config, *write_default).map(|_| true),
        Command::Eval { checkpoint, config } => cmd_eval(checkpoint, config).map(|_| true),
        Command::Compare { placements, profile } => cmd_compare(placements, *profile).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
