//! Command arguments, resolution against file/env configuration, and
//! execution. Resolution happens once, into a [`CommandSpec`]; execution is
//! a pure function of that spec plus the output directory, which is what
//! makes manifests replayable.

use std::path::Path;

use clap::Args;

use preflab::datagen::{
    designated_pairs, gen_instance, instance_manifest, sample_preferences_from, InstanceSpec,
    PreferenceDataset,
};
use preflab::experiments::{
    grad_sweep, hack_probe, log_spaced_grid, loss_curve, oracle_check, OracleCheckConfig,
    ProbeConfig, SweepOperatingPoint,
};
use preflab::gradcheck::{check_loss_grads, linear_grid, GradReport};
use preflab::losses::{LossKind, LossSpec};
use preflab::policy::{ReferencePolicy, TabularPolicy};
use preflab::trainer::{train, BatchMode, OptimizerKind, RunRecord, TrainConfig};

use crate::config::{parse_env_f64_list, parse_env_string_list, parse_env_u64, FileConfig};
use crate::errors::{CliError, EXIT_TOLERANCE};
use crate::manifest::{
    sha256_hex, CommandSpec, DatasetSource, GenSpec, GradcheckSpec, GradsweepSpec, HackprobeSpec,
    LosscurveSpec, OracleCheckSpec, OutputEntry, TrainCmdSpec,
};

// ---------------------------------------------------------------------------
// Shared flag groups
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Loss to include: dpo, spo, or sq (repeatable).
    #[arg(long = "loss", value_name = "KIND")]
    pub loss: Vec<String>,
    /// Beta value (repeatable).
    #[arg(long = "beta", value_name = "REAL")]
    pub beta: Vec<f64>,
    /// Reward-gap target for the squared-target loss.
    #[arg(long, value_name = "REAL")]
    pub gap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    #[arg(long, value_name = "N")]
    pub n_prompts: Option<usize>,
    #[arg(long, value_name = "N")]
    pub n_responses: Option<usize>,
    #[arg(long, value_name = "REAL")]
    pub reward_scale: Option<f64>,
    /// Per-block feature dimension; enables feature generation.
    #[arg(long, value_name = "N")]
    pub feature_dim: Option<usize>,
    /// Shared feature mass between each prompt's designated pair, in `[0, 1]`.
    #[arg(long, value_name = "REAL")]
    pub feature_collision: Option<f64>,
}

struct InstanceDefaults {
    n_prompts: usize,
    n_responses: usize,
    reward_scale: f64,
    feature_dim: Option<usize>,
    feature_collision: f64,
}

fn resolve_seed(file: &FileConfig, section: &str, flag: Option<u64>) -> Result<u64, CliError> {
    Ok(flag
        .or(parse_env_u64("SEED")?)
        .or(file.u64(section, "seed")?)
        .unwrap_or(42))
}

fn resolve_instance(
    file: &FileConfig,
    section: &str,
    args: &InstanceArgs,
    seed_flag: Option<u64>,
    defaults: InstanceDefaults,
) -> Result<InstanceSpec, CliError> {
    let spec = InstanceSpec {
        n_prompts: args
            .n_prompts
            .or(file.usize(section, "n_prompts")?)
            .unwrap_or(defaults.n_prompts),
        n_responses: args
            .n_responses
            .or(file.usize(section, "n_responses")?)
            .unwrap_or(defaults.n_responses),
        reward_scale: args
            .reward_scale
            .or(file.f64(section, "reward_scale")?)
            .unwrap_or(defaults.reward_scale),
        seed: resolve_seed(file, section, seed_flag)?,
        feature_dim: args
            .feature_dim
            .or(file.usize(section, "feature_dim")?)
            .or(defaults.feature_dim),
        feature_collision: args
            .feature_collision
            .or(file.f64(section, "feature_collision")?)
            .unwrap_or(defaults.feature_collision),
    };
    spec.validate().map_err(CliError::from)?;
    Ok(spec)
}

fn resolve_losses(
    file: &FileConfig,
    section: &str,
    args: &LossArgs,
    default_kinds: &[&str],
    default_betas: &[f64],
) -> Result<Vec<LossSpec>, CliError> {
    let kinds: Vec<String> = if !args.loss.is_empty() {
        args.loss.clone()
    } else if let Some(env) = parse_env_string_list("LOSS") {
        env
    } else if let Some(from_file) = file.string_list(section, "loss")? {
        from_file
    } else {
        default_kinds.iter().map(|s| s.to_string()).collect()
    };
    let betas: Vec<f64> = if !args.beta.is_empty() {
        args.beta.clone()
    } else if let Some(env) = parse_env_f64_list("BETA")? {
        env
    } else if let Some(from_file) = file.f64_list(section, "beta")? {
        from_file
    } else {
        default_betas.to_vec()
    };
    let gap = args.gap.or(file.f64(section, "gap")?).unwrap_or(1.0);

    let mut specs = Vec::with_capacity(kinds.len() * betas.len());
    for token in &kinds {
        let kind = LossKind::parse(token).ok_or_else(|| {
            CliError::Config(format!("unknown loss {token:?}; use dpo, spo, or sq"))
        })?;
        for &beta in &betas {
            specs.push(LossSpec::build(kind, beta, gap)?);
        }
    }
    if specs.is_empty() {
        return Err(CliError::Config("no losses resolved".into()));
    }
    Ok(specs)
}

fn single_loss(specs: Vec<LossSpec>, command: &str) -> Result<LossSpec, CliError> {
    if specs.len() != 1 {
        return Err(CliError::Config(format!(
            "{command} takes exactly one --loss and one --beta, got {} combinations",
            specs.len()
        )));
    }
    Ok(specs[0])
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Number of preference pairs to sample.
    #[arg(long, value_name = "N")]
    pub n_pairs: Option<usize>,
    /// Seed for pair sampling; defaults to the instance seed.
    #[arg(long, value_name = "U64")]
    pub pair_seed: Option<u64>,
}

pub fn resolve_gen(
    file: &FileConfig,
    args: &GenArgs,
    seed: Option<u64>,
) -> Result<CommandSpec, CliError> {
    let section = "gen";
    let instance = resolve_instance(
        file,
        section,
        &args.instance,
        seed,
        InstanceDefaults {
            n_prompts: 4,
            n_responses: 8,
            reward_scale: 1.0,
            feature_dim: None,
            feature_collision: 0.0,
        },
    )?;
    Ok(CommandSpec::Gen(GenSpec {
        n_pairs: args
            .n_pairs
            .or(file.usize(section, "n_pairs")?)
            .unwrap_or(256),
        pair_seed: args
            .pair_seed
            .or(file.u64(section, "pair_seed")?)
            .unwrap_or(instance.seed),
        instance,
    }))
}

fn execute_gen(spec: &GenSpec, out: &Path) -> Result<(Vec<OutputEntry>, i32), CliError> {
    let instance = gen_instance(&spec.instance)?;
    let dataset = sample_preferences_from(&instance, spec.n_pairs, spec.pair_seed)?;
    let mut outputs = Vec::new();
    outputs.push(write_output(out, "rewards.csv", &instance.reward.to_csv())?);
    outputs.push(write_output(
        out,
        "reference.json",
        &(instance.reference.to_document().to_json() + "\n"),
    )?);
    outputs.push(write_output(out, "dataset.jsonl", &dataset.to_jsonl())?);
    if let Some(features) = &instance.features {
        let text =
            serde_json::to_string_pretty(features).map_err(|e| CliError::Io(e.to_string()))?;
        outputs.push(write_output(out, "features.json", &(text + "\n"))?);
    }
    let manifest = instance_manifest(&instance, &dataset);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    outputs.push(write_output(out, "instance.json", &(text + "\n"))?);
    println!(
        "gen wrote {} pairs over {}x{} (digest {})",
        spec.n_pairs,
        spec.instance.n_prompts,
        spec.instance.n_responses,
        &manifest.content_digest[..12]
    );
    Ok((outputs, 0))
}

// ---------------------------------------------------------------------------
// losscurve
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub losses: LossArgs,
    #[arg(long, value_name = "REAL")]
    pub grid_min: Option<f64>,
    #[arg(long, value_name = "REAL")]
    pub grid_max: Option<f64>,
    #[arg(long, value_name = "N")]
    pub grid_points: Option<usize>,
}

pub fn resolve_losscurve(file: &FileConfig, args: &CurveArgs) -> Result<CommandSpec, CliError> {
    let section = "losscurve";
    let losses = resolve_losses(
        file,
        section,
        &args.losses,
        &["dpo", "spo"],
        &[0.1, 0.5, 1.0],
    )?;
    let spec = LosscurveSpec {
        losses,
        grid_min: args
            .grid_min
            .or(file.f64(section, "grid_min")?)
            .unwrap_or(-20.0),
        grid_max: args
            .grid_max
            .or(file.f64(section, "grid_max")?)
            .unwrap_or(50.0),
        grid_points: args
            .grid_points
            .or(file.usize(section, "grid_points")?)
            .unwrap_or(701),
    };
    check_grid(spec.grid_min, spec.grid_max, spec.grid_points)?;
    Ok(CommandSpec::Losscurve(spec))
}

fn check_grid(min: f64, max: f64, points: usize) -> Result<(), CliError> {
    if !(min.is_finite() && max.is_finite() && max > min && points >= 2) {
        return Err(CliError::Config(format!(
            "grid needs finite min < max and at least 2 points, got [{min}, {max}] x {points}"
        )));
    }
    Ok(())
}

fn execute_losscurve(
    spec: &LosscurveSpec,
    out: &Path,
) -> Result<(Vec<OutputEntry>, i32), CliError> {
    let grid = linear_grid(spec.grid_min, spec.grid_max, spec.grid_points);
    let points = loss_curve(&spec.losses, &grid)?;
    let overflowed = points.iter().filter(|p| p.eval.is_none()).count();
    let mut csv = String::from(preflab::experiments::LossCurvePoint::CSV_HEADER);
    csv.push('\n');
    for p in &points {
        csv.push_str(&p.csv_row());
        csv.push('\n');
    }
    let outputs = vec![write_output(out, "losscurve.csv", &csv)?];
    println!(
        "losscurve wrote {} rows ({} flagged overflow)",
        points.len(),
        overflowed
    );
    Ok((outputs, 0))
}

// ---------------------------------------------------------------------------
// gradsweep
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub losses: LossArgs,
    #[arg(long, value_name = "REAL")]
    pub pi_l_min: Option<f64>,
    #[arg(long, value_name = "REAL")]
    pub pi_l_max: Option<f64>,
    #[arg(long, value_name = "N")]
    pub points: Option<usize>,
    /// Fixed winner probability of the operating point.
    #[arg(long, value_name = "REAL")]
    pub pi_w: Option<f64>,
    /// Fixed reference probability of the winner.
    #[arg(long, value_name = "REAL")]
    pub ref_w: Option<f64>,
    /// Fixed reference probability of the loser.
    #[arg(long, value_name = "REAL")]
    pub ref_l: Option<f64>,
    /// The power-law fit uses grid points with pi_l at or below this.
    #[arg(long, value_name = "REAL")]
    pub fit_max: Option<f64>,
}

pub fn resolve_gradsweep(file: &FileConfig, args: &SweepArgs) -> Result<CommandSpec, CliError> {
    let section = "gradsweep";
    let losses = resolve_losses(
        file,
        section,
        &args.losses,
        &["dpo", "spo"],
        &[0.1, 0.5, 1.0],
    )?;
    let default_op = SweepOperatingPoint::default();
    let spec = GradsweepSpec {
        losses,
        pi_l_min: args
            .pi_l_min
            .or(file.f64(section, "pi_l_min")?)
            .unwrap_or(1e-8),
        pi_l_max: args
            .pi_l_max
            .or(file.f64(section, "pi_l_max")?)
            .unwrap_or(0.5),
        points: args.points.or(file.usize(section, "points")?).unwrap_or(60),
        operating_point: SweepOperatingPoint {
            pi_w: args
                .pi_w
                .or(file.f64(section, "pi_w")?)
                .unwrap_or(default_op.pi_w),
            ref_w: args
                .ref_w
                .or(file.f64(section, "ref_w")?)
                .unwrap_or(default_op.ref_w),
            ref_l: args
                .ref_l
                .or(file.f64(section, "ref_l")?)
                .unwrap_or(default_op.ref_l),
        },
        fit_max: args
            .fit_max
            .or(file.f64(section, "fit_max")?)
            .unwrap_or(1e-6),
    };
    if !(spec.pi_l_min > 0.0 && spec.pi_l_max > spec.pi_l_min && spec.points >= 2) {
        return Err(CliError::Config(format!(
            "pi_l grid needs 0 < min < max and at least 2 points, got [{}, {}] x {}",
            spec.pi_l_min, spec.pi_l_max, spec.points
        )));
    }
    Ok(CommandSpec::Gradsweep(spec))
}

fn execute_gradsweep(
    spec: &GradsweepSpec,
    out: &Path,
) -> Result<(Vec<OutputEntry>, i32), CliError> {
    let grid = log_spaced_grid(spec.pi_l_min, spec.pi_l_max, spec.points);
    let (points, fits) = grad_sweep(&spec.losses, &spec.operating_point, &grid, spec.fit_max)?;
    let mut csv = String::from(preflab::experiments::SweepPoint::CSV_HEADER);
    csv.push('\n');
    for p in &points {
        csv.push_str(&p.csv_row());
        csv.push('\n');
    }
    let mut fit_csv = String::from(preflab::experiments::PowerLawFit::CSV_HEADER);
    fit_csv.push('\n');
    for f in &fits {
        fit_csv.push_str(&f.csv_row());
        fit_csv.push('\n');
    }
    let outputs = vec![
        write_output(out, "gradsweep.csv", &csv)?,
        write_output(out, "gradsweep_fits.csv", &fit_csv)?,
    ];
    for f in &fits {
        println!(
            "gradsweep {} beta={}: slope {:.4} over {} points",
            f.kind, f.beta, f.slope, f.n_points
        );
    }
    Ok((outputs, 0))
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub losses: LossArgs,
    #[arg(long, value_name = "REAL")]
    pub grid_min: Option<f64>,
    #[arg(long, value_name = "REAL")]
    pub grid_max: Option<f64>,
    #[arg(long, value_name = "N")]
    pub grid_points: Option<usize>,
    /// Relative tolerance for a point to pass.
    #[arg(long, value_name = "REAL")]
    pub tol: Option<f64>,
}

pub fn resolve_gradcheck(file: &FileConfig, args: &CheckArgs) -> Result<CommandSpec, CliError> {
    let section = "gradcheck";
    let losses = resolve_losses(
        file,
        section,
        &args.losses,
        &["dpo", "spo", "sq"],
        &[0.05, 0.1, 0.5, 1.0, 5.0],
    )?;
    let spec = GradcheckSpec {
        losses,
        grid_min: args
            .grid_min
            .or(file.f64(section, "grid_min")?)
            .unwrap_or(-20.0),
        grid_max: args
            .grid_max
            .or(file.f64(section, "grid_max")?)
            .unwrap_or(20.0),
        grid_points: args
            .grid_points
            .or(file.usize(section, "grid_points")?)
            .unwrap_or(201),
        tolerance: args.tol.or(file.f64(section, "tol")?).unwrap_or(1e-5),
    };
    check_grid(spec.grid_min, spec.grid_max, spec.grid_points)?;
    Ok(CommandSpec::Gradcheck(spec))
}

fn execute_gradcheck(
    spec: &GradcheckSpec,
    out: &Path,
) -> Result<(Vec<OutputEntry>, i32), CliError> {
    let grid = linear_grid(spec.grid_min, spec.grid_max, spec.grid_points);
    let mut outputs = Vec::new();
    let mut failures = 0usize;
    for loss in &spec.losses {
        let reports = check_loss_grads(loss, &grid, spec.tolerance)?;
        failures += reports.iter().filter(|r| !r.pass).count();
        let mut csv = String::from(GradReport::CSV_HEADER);
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        let name = format!("gradcheck_{}_{}.csv", loss.kind, loss.beta);
        outputs.push(write_output(out, &name, &csv)?);
    }
    if failures > 0 {
        println!(
            "gradcheck: {failures} points FAILED at tol {}",
            spec.tolerance
        );
        Ok((outputs, EXIT_TOLERANCE))
    } else {
        println!(
            "gradcheck: all {} specs passed over {} points",
            spec.losses.len(),
            spec.grid_points
        );
        Ok((outputs, 0))
    }
}

// ---------------------------------------------------------------------------
// oracle-check
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Beta of the objective being verified.
    #[arg(long, value_name = "REAL")]
    pub beta: Option<f64>,
    /// Number of random perturbed policies for the dominance check.
    #[arg(long, value_name = "N")]
    pub perturbations: Option<usize>,
    /// Residual tolerance.
    #[arg(long, value_name = "REAL")]
    pub tol: Option<f64>,
}

pub fn resolve_oracle_check(
    file: &FileConfig,
    args: &OracleArgs,
    seed: Option<u64>,
) -> Result<CommandSpec, CliError> {
    let section = "oracle-check";
    let instance = resolve_instance(
        file,
        section,
        &args.instance,
        seed,
        InstanceDefaults {
            n_prompts: 4,
            n_responses: 8,
            reward_scale: 1.0,
            feature_dim: None,
            feature_collision: 0.0,
        },
    )?;
    Ok(CommandSpec::OracleCheck(OracleCheckSpec {
        check: OracleCheckConfig {
            instance,
            beta: args.beta.or(file.f64(section, "beta")?).unwrap_or(1.0),
            perturbations: args
                .perturbations
                .or(file.usize(section, "perturbations")?)
                .unwrap_or(1000),
            tolerance: args.tol.or(file.f64(section, "tol")?).unwrap_or(1e-10),
        },
    }))
}

fn execute_oracle_check(
    spec: &OracleCheckSpec,
    out: &Path,
) -> Result<(Vec<OutputEntry>, i32), CliError> {
    let report = oracle_check(&spec.check)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    let outputs = vec![write_output(out, "oracle_check.json", &(text + "\n"))?];
    println!(
        "oracle-check: identity {:.3e}, optimality {:.3e}, closed-form gap {:.3e}, \
         dominance failures {}/{} -> {}",
        report.max_identity_residual,
        report.max_optimality_residual,
        report.closed_form_gap,
        report.dominance_failures,
        report.perturbations,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok((outputs, if report.passed { 0 } else { EXIT_TOLERANCE }))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub losses: LossArgs,
    /// Dataset source: "sampled" or "designated".
    #[arg(long, value_name = "SOURCE")]
    pub pairs: Option<String>,
    #[arg(long, value_name = "N")]
    pub n_pairs: Option<usize>,
    #[arg(long, value_name = "U64")]
    pub pair_seed: Option<u64>,
    /// Optimizer: "sgd" or "adam".
    #[arg(long, value_name = "OPT")]
    pub optimizer: Option<String>,
    #[arg(long, value_name = "REAL")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    /// Batch: "full" or a minibatch size.
    #[arg(long, value_name = "BATCH")]
    pub batch: Option<String>,
    #[arg(long, value_name = "U64")]
    pub batch_seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub log_every: Option<usize>,
    /// L2 gradient-norm clip threshold.
    #[arg(long, value_name = "REAL")]
    pub grad_clip: Option<f64>,
    /// Seeded random init scale; 0 keeps the uniform initialization.
    #[arg(long, value_name = "REAL")]
    pub init_scale: Option<f64>,
}

pub fn resolve_train(
    file: &FileConfig,
    args: &TrainArgs,
    seed: Option<u64>,
) -> Result<CommandSpec, CliError> {
    let section = "train";
    let instance = resolve_instance(
        file,
        section,
        &args.instance,
        seed,
        InstanceDefaults {
            n_prompts: 2,
            n_responses: 4,
            reward_scale: 1.0,
            feature_dim: None,
            feature_collision: 0.0,
        },
    )?;
    let loss = single_loss(
        resolve_losses(file, section, &args.losses, &["dpo"], &[0.1])?,
        "train",
    )?;

    let source = args
        .pairs
        .clone()
        .or(file.string(section, "pairs")?)
        .unwrap_or_else(|| "sampled".to_string());
    let dataset = match source.as_str() {
        "sampled" => DatasetSource::Sampled {
            n_pairs: args
                .n_pairs
                .or(file.usize(section, "n_pairs")?)
                .unwrap_or(16),
            pair_seed: args
                .pair_seed
                .or(file.u64(section, "pair_seed")?)
                .unwrap_or(instance.seed),
        },
        "designated" => DatasetSource::Designated,
        other => {
            return Err(CliError::Config(format!(
                "--pairs must be \"sampled\" or \"designated\", got {other:?}"
            )))
        }
    };

    let optimizer = match args
        .optimizer
        .clone()
        .or(file.string(section, "optimizer")?)
        .unwrap_or_else(|| "sgd".to_string())
        .as_str()
    {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::adam(),
        other => {
            return Err(CliError::Config(format!(
                "--optimizer must be \"sgd\" or \"adam\", got {other:?}"
            )))
        }
    };

    let batch_token = args
        .batch
        .clone()
        .or(file.string(section, "batch")?)
        .unwrap_or_else(|| "full".to_string());
    let batch = if batch_token == "full" {
        BatchMode::Full
    } else {
        let size: usize = batch_token.parse().map_err(|_| {
            CliError::Config(format!(
                "--batch must be \"full\" or a minibatch size, got {batch_token:?}"
            ))
        })?;
        BatchMode::Minibatch {
            size,
            seed: args
                .batch_seed
                .or(file.u64(section, "batch_seed")?)
                .unwrap_or(instance.seed),
        }
    };

    let steps = args.steps.or(file.usize(section, "steps")?).unwrap_or(2000);
    let train = TrainConfig {
        loss,
        optimizer,
        learning_rate: args.lr.or(file.f64(section, "lr")?).unwrap_or(0.05),
        steps,
        batch,
        log_every: args
            .log_every
            .or(file.usize(section, "log_every")?)
            .unwrap_or_else(|| (steps / 20).max(1)),
        grad_clip: args.grad_clip.or(file.f64(section, "grad_clip")?),
    };
    train.validate().map_err(CliError::from)?;

    Ok(CommandSpec::Train(TrainCmdSpec {
        instance,
        dataset,
        train,
        init_scale: args
            .init_scale
            .or(file.f64(section, "init_scale")?)
            .unwrap_or(0.0),
    }))
}

fn execute_train(spec: &TrainCmdSpec, out: &Path) -> Result<(Vec<OutputEntry>, i32), CliError> {
    let instance = gen_instance(&spec.instance)?;
    let dataset = match spec.dataset {
        DatasetSource::Sampled { n_pairs, pair_seed } => {
            sample_preferences_from(&instance, n_pairs, pair_seed)?
        }
        DatasetSource::Designated => PreferenceDataset::manual(
            designated_pairs(spec.instance.n_prompts),
            spec.instance.n_prompts,
            spec.instance.n_responses,
        )?,
    };
    let policy = if spec.init_scale > 0.0 {
        TabularPolicy::seeded(
            spec.instance.n_prompts,
            spec.instance.n_responses,
            spec.init_scale,
            spec.instance.seed,
        )
    } else {
        TabularPolicy::uniform(spec.instance.n_prompts, spec.instance.n_responses)
    };
    let reference = ReferencePolicy::from_policy(&policy)?;
    let outcome = train(&policy, &reference, &dataset, &spec.train)?;

    let mut csv = String::from(RunRecord::CSV_HEADER);
    csv.push('\n');
    for r in &outcome.records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let outputs = vec![
        write_output(out, "run.csv", &csv)?,
        write_output(
            out,
            "policy.json",
            &(outcome.policy.to_document().to_json() + "\n"),
        )?,
    ];
    let last = outcome
        .records
        .last()
        .expect("at least the step-0 snapshot");
    println!(
        "train: {} steps of {} beta={} -> mean loss {:.6}, final beta*logits {:.6} (pair 0)",
        spec.train.steps,
        spec.train.loss.kind,
        spec.train.loss.beta,
        last.mean_loss,
        outcome
            .records
            .iter()
            .rev()
            .find(|r| r.pair_id == 0)
            .map(|r| r.beta_logits)
            .unwrap_or(f64::NAN)
    );
    Ok((outputs, 0))
}

// ---------------------------------------------------------------------------
// hackprobe
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub losses: LossArgs,
    /// Feature-collision value to probe (repeatable).
    #[arg(long = "collision", value_name = "REAL")]
    pub collisions: Vec<f64>,
    #[arg(long, value_name = "REAL")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    #[arg(long, value_name = "N")]
    pub log_every: Option<usize>,
}

pub fn resolve_hackprobe(
    file: &FileConfig,
    args: &ProbeArgs,
    seed: Option<u64>,
) -> Result<CommandSpec, CliError> {
    let section = "hackprobe";
    let instance = resolve_instance(
        file,
        section,
        &args.instance,
        seed,
        InstanceDefaults {
            n_prompts: 1,
            n_responses: 3,
            reward_scale: 1.0,
            feature_dim: Some(2),
            feature_collision: 0.0,
        },
    )?;
    if instance.feature_dim.is_none() {
        return Err(CliError::Config(
            "hackprobe needs --feature-dim to build a feature instance".into(),
        ));
    }
    let collisions = if !args.collisions.is_empty() {
        args.collisions.clone()
    } else {
        file.f64_list(section, "collision")?
            .unwrap_or_else(|| vec![0.0, 0.5, 1.0])
    };
    for &c in &collisions {
        if !(0.0..=1.0).contains(&c) {
            return Err(CliError::Config(format!(
                "collision values must lie in [0, 1], got {c}"
            )));
        }
    }
    let losses = resolve_losses(file, section, &args.losses, &["dpo", "spo"], &[0.1])?;
    Ok(CommandSpec::Hackprobe(HackprobeSpec {
        instance,
        collisions,
        losses,
        learning_rate: args.lr.or(file.f64(section, "lr")?).unwrap_or(0.05),
        steps: args.steps.or(file.usize(section, "steps")?).unwrap_or(2000),
        log_every: args
            .log_every
            .or(file.usize(section, "log_every")?)
            .unwrap_or(10),
    }))
}

fn execute_hackprobe(
    spec: &HackprobeSpec,
    out: &Path,
) -> Result<(Vec<OutputEntry>, i32), CliError> {
    let mut outputs = Vec::new();
    for &collision in &spec.collisions {
        let config = ProbeConfig {
            instance: InstanceSpec {
                feature_collision: collision,
                ..spec.instance
            },
            losses: spec.losses.clone(),
            learning_rate: spec.learning_rate,
            steps: spec.steps,
            log_every: spec.log_every,
        };
        let trajectories = match hack_probe(&config) {
            Ok(t) => t,
            Err(preflab::experiments::ExperimentError::Train(train_err)) => {
                // Clean abort record: which cell failed and why, then stop.
                let abort = serde_json::json!({
                    "collision": collision,
                    "error": train_err.to_string(),
                });
                outputs.push(write_output(
                    out,
                    "abort.json",
                    &(serde_json::to_string_pretty(&abort)
                        .map_err(|e| CliError::Io(e.to_string()))?
                        + "\n"),
                )?);
                return Err(CliError::Numeric(format!(
                    "probe aborted at collision {collision}: {train_err}"
                )));
            }
            Err(e) => return Err(e.into()),
        };
        let mut csv = String::from(preflab::experiments::ProbeRow::CSV_HEADER);
        csv.push('\n');
        for t in &trajectories {
            for row in &t.rows {
                csv.push_str(&row.csv_row());
                csv.push('\n');
            }
        }
        let name = format!("hackprobe_c{collision}.csv");
        outputs.push(write_output(out, &name, &csv)?);
        println!(
            "hackprobe collision={collision}: {} losses x {} logged rows",
            trajectories.len(),
            trajectories.first().map(|t| t.rows.len()).unwrap_or(0)
        );
    }
    Ok((outputs, 0))
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

pub fn execute(spec: &CommandSpec, out: &Path) -> Result<(Vec<OutputEntry>, i32), CliError> {
    match spec {
        CommandSpec::Gen(s) => execute_gen(s, out),
        CommandSpec::Losscurve(s) => execute_losscurve(s, out),
        CommandSpec::Gradsweep(s) => execute_gradsweep(s, out),
        CommandSpec::Gradcheck(s) => execute_gradcheck(s, out),
        CommandSpec::OracleCheck(s) => execute_oracle_check(s, out),
        CommandSpec::Train(s) => execute_train(s, out),
        CommandSpec::Hackprobe(s) => execute_hackprobe(s, out),
    }
}

fn write_output(dir: &Path, name: &str, content: &str) -> Result<OutputEntry, CliError> {
    std::fs::write(dir.join(name), content)?;
    Ok(OutputEntry {
        file: name.to_string(),
        sha256: sha256_hex(content.as_bytes()),
    })
}
