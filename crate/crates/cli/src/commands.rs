//! Subcommand implementations. Every command resolves its configuration,
//! writes its outputs into the run directory, and finishes by writing the
//! manifest; on failure the manifest still lands, flagged incomplete.

use std::path::{Path, PathBuf};

use serde_json::json;

use qdual_core::analysis::{
    evaluate_decoders, j_landscape, tabular_fixed_point, verify_gradient_identity, Aggregation,
    DecodeRule, EvalTable, FixedPointConfig, GridSpec, Similarity, UtilitySpec,
};
use qdual_core::decoding::{
    beam_search, exact_map, greedy_decode, sample_decode, DecodeResult, DEFAULT_NODE_BUDGET,
};
use qdual_core::model::{load_checkpoint, QModel};
use qdual_core::parallel::maybe_par_map;
use qdual_core::rng::RngStream;
use qdual_core::tasks::{SyntheticTask, DEFAULT_SUPPORT_CAP};
use qdual_core::training::{mabe_train, TrainLogRow};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::RunDir;
use crate::output::{fmt_float, json_float, line_chart, parse_csv, parse_float, Csv, Series};

/// Resolved invocation context shared by the subcommands.
pub struct Ctx {
    pub config: ExperimentConfig,
    /// Pretty-printed resolved configuration (hashed into the manifest).
    pub config_json: String,
    pub seed: u64,
    pub out: PathBuf,
}

impl Ctx {
    fn task(&self) -> Result<SyntheticTask, CliError> {
        Ok(self.config.task.build()?)
    }

    fn utility(&self) -> UtilitySpec {
        UtilitySpec {
            similarity: Similarity::ExactMatch,
            aggregation: Aggregation::Average,
        }
    }

    fn checkpoint_path(&self, explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.out.join("checkpoint.txt"))
    }
}

/// Run `body` inside a fresh run directory; always leave a manifest.
fn with_run_dir(
    ctx: &Ctx,
    body: impl FnOnce(&mut RunDir) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut run = RunDir::create(&ctx.out)?;
    run.write("config.json", &ctx.config_json)?;
    match body(&mut run) {
        Ok(()) => {
            run.finish(&ctx.config_json, true, None)?;
            Ok(())
        }
        Err(err) => {
            let message = err.to_string();
            run.finish(&ctx.config_json, false, Some(&message))?;
            Err(err)
        }
    }
}

const TRAIN_LOG_HEADER: [&str; 7] = [
    "step",
    "j_data",
    "j_seq",
    "j_token",
    "j_mabe",
    "grad_norm",
    "probe_exact_match",
];

fn train_log_row(row: &TrainLogRow) -> Vec<String> {
    vec![
        row.step.to_string(),
        fmt_float(row.j_data),
        fmt_float(row.j_seq),
        fmt_float(row.j_token),
        fmt_float(row.j_mabe),
        fmt_float(row.grad_norm),
        fmt_float(row.probe_exact_match),
    ]
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(ctx: &Ctx) -> Result<(), CliError> {
    with_run_dir(ctx, |run| {
        let task = ctx.task()?;
        let family = ctx.config.model.family();
        let train_cfg = ctx.config.train.to_train_config(&family, ctx.seed);
        let model = ctx.config.model.build(task.vocab_size(), ctx.seed)?;

        // Periodic checkpoints replay a prefix of the same deterministic
        // trajectory; the full run then continues to the end.
        let checkpoint_every = ctx.config.train.checkpoint_every;
        if checkpoint_every > 0 {
            let mut at = checkpoint_every;
            while at < train_cfg.steps {
                let mut prefix_cfg = train_cfg.clone();
                prefix_cfg.steps = at;
                let (snapshot, _) = mabe_train(model.clone(), &task, &prefix_cfg)?;
                run.write(
                    &format!("checkpoint_{at}.txt"),
                    qdual_core::model::checkpoint_to_string(&snapshot),
                )?;
                at += checkpoint_every;
            }
        }
        let (trained, log) = mabe_train(model, &task, &train_cfg)?;

        let mut csv = Csv::new(&TRAIN_LOG_HEADER);
        let mut timings = String::new();
        for row in &log {
            csv.row(&train_log_row(row));
            timings.push_str(&format!("step {} wall_clock_ms {}\n", row.step, row.wall_clock_ms));
        }
        run.write("train_log.csv", csv.into_string())?;
        // Wall-clock goes into a plain-text sidecar so the metrics CSV stays
        // byte-identical across reruns.
        run.write("timings.txt", timings)?;

        let checkpoint_text = qdual_core::model::checkpoint_to_string(&trained);
        run.write("checkpoint.txt", checkpoint_text)?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

pub fn cmd_decode(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<(), CliError> {
    with_run_dir(ctx, |run| {
        let task = ctx.task()?;
        let model = load_model_for_task(&ctx.checkpoint_path(checkpoint), &task)?;
        let scorers = ctx.config.decode.scorers()?;
        let rules = ctx.config.decode.rules()?;
        let instances = ctx.config.eval_instances();

        let mut records = Vec::new();
        let mut csv = Csv::new(&[
            "instance",
            "rule",
            "scorer",
            "tokens",
            "total_log10_prob",
            "forced_eos",
            "candidates_expanded",
        ]);
        for (scorer_idx, &scorer) in scorers.iter().enumerate() {
            for (rule_idx, &rule) in rules.iter().enumerate() {
                let row_tag = (scorer_idx * rules.len() + rule_idx) as u64;
                let outputs: Vec<Result<(Vec<usize>, DecodeResult), CliError>> =
                    maybe_par_map(instances, |i| {
                        let mut xr = RngStream::new(
                            ctx.seed,
                            qdual_core::analysis::EVAL_INSTANCE_TAG | i as u64,
                        );
                        let x = task.sample_input(&mut xr);
                        let forced = task.forced_eos_step(&x);
                        let result = match rule {
                            DecodeRule::Greedy => greedy_decode(&model, &x, scorer, forced)?,
                            DecodeRule::Sample { beta } => {
                                let mut rng = RngStream::new(
                                    ctx.seed,
                                    qdual_core::analysis::EVAL_DECODE_TAG
                                        | (row_tag * instances as u64 + i as u64),
                                );
                                sample_decode(&model, &x, scorer, beta, &mut rng, forced)?
                            }
                            DecodeRule::Beam { size } => {
                                beam_search(&model, &x, scorer, size, forced)?
                            }
                            DecodeRule::ExactMap => {
                                exact_map(&model, &x, scorer, forced, DEFAULT_NODE_BUDGET)?
                            }
                        };
                        Ok((x, result))
                    });
                for (i, item) in outputs.into_iter().enumerate() {
                    let (x, decode) = item?;
                    let log10 = decode.total_log_prob / std::f64::consts::LN_10;
                    csv.row(&[
                        i.to_string(),
                        rule.label(),
                        scorer.tag().to_string(),
                        decode
                            .tokens
                            .iter()
                            .map(usize::to_string)
                            .collect::<Vec<_>>()
                            .join(" "),
                        fmt_float(log10),
                        decode.forced_eos.to_string(),
                        decode.candidates_expanded.to_string(),
                    ]);
                    records.push(json!({
                        "instance": i,
                        "input": x,
                        "rule": rule.label(),
                        "scorer": scorer.tag(),
                        "tokens": decode.tokens,
                        "step_log_probs": decode.step_log_probs.iter().map(|&l| json_float(l)).collect::<Vec<_>>(),
                        "total_log10_prob": json_float(log10),
                        "forced_eos": decode.forced_eos,
                        "candidates_expanded": decode.candidates_expanded,
                    }));
                }
            }
        }
        run.write("decodes.csv", csv.into_string())?;
        run.write(
            "decodes.json",
            serde_json::to_string_pretty(&serde_json::Value::Array(records))
                .expect("decode records serialize"),
        )?;
        Ok(())
    })
}

fn load_model_for_task(path: &Path, task: &SyntheticTask) -> Result<QModel, CliError> {
    let model = load_checkpoint(path)?;
    if model.vocab_size() != task.vocab_size() {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary {} does not match task vocabulary {}",
            model.vocab_size(),
            task.vocab_size()
        )));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn cmd_sweep(ctx: &Ctx) -> Result<(), CliError> {
    with_run_dir(ctx, |run| {
        let task = ctx.task()?;
        let family = ctx.config.model.family();
        let lambdas = ctx.config.sweep_lambdas.clone();

        // Branches share the seed, hence the exact data order; they run in
        // parallel and merge in lambda order.
        let branches: Vec<Result<(QModel, Vec<TrainLogRow>), CliError>> =
            maybe_par_map(lambdas.len(), |k| {
                let mut cfg = ctx.config.train.to_train_config(&family, ctx.seed);
                cfg.lambda = lambdas[k];
                cfg.label_smoothing = 0.0;
                let model = ctx.config.model.build(task.vocab_size(), ctx.seed)?;
                Ok(mabe_train(model, &task, &cfg)?)
            });

        let mut header = vec!["lambda"];
        header.extend_from_slice(&TRAIN_LOG_HEADER);
        let mut csv = Csv::new(&header);
        let mut curves = Vec::new();
        for (k, branch) in branches.into_iter().enumerate() {
            let (model, log) = branch?;
            let lambda = lambdas[k];
            let mut points = Vec::new();
            for row in &log {
                let mut cells = vec![fmt_float(lambda)];
                cells.extend(train_log_row(row));
                csv.row(&cells);
                points.push((row.step as f64, row.probe_exact_match));
            }
            curves.push(Series {
                label: format!("lambda={lambda}"),
                points,
            });
            let text = qdual_core::model::checkpoint_to_string(&model);
            run.write(&format!("checkpoint_lambda_{lambda}.txt"), text)?;
        }
        run.write("sweep_log.csv", csv.into_string())?;
        run.write(
            "sweep_exact_match.svg",
            line_chart(
                "greedy exact match vs step",
                "step",
                "exact match",
                &curves,
            ),
        )?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// theorem
// ---------------------------------------------------------------------------

pub fn cmd_theorem(ctx: &Ctx) -> Result<(), CliError> {
    let mut all_pass = true;
    with_run_dir(ctx, |run| {
        let spec = &ctx.config.theorem;
        let mut instances: Vec<Vec<f64>> = spec.p_true.clone();
        let mut rng = RngStream::new(ctx.seed, 0x7E);
        for _ in 0..spec.random_instances {
            let d = 3 + rng.next_index(spec.d_max.saturating_sub(2).max(1));
            let support = 1 + rng.next_index(d - 1);
            let mut p = vec![0.0; d];
            let mut total = 0.0;
            for slot in p.iter_mut().take(support) {
                *slot = 0.05 + rng.next_f64();
                total += *slot;
            }
            for slot in p.iter_mut() {
                *slot /= total;
            }
            instances.push(p);
        }

        let reports: Vec<_> = maybe_par_map(instances.len(), |i| {
            tabular_fixed_point(&instances[i], &FixedPointConfig::default())
        });

        let mut records = Vec::new();
        let mut summary = String::new();
        for (i, report) in reports.into_iter().enumerate() {
            let report = report?;
            let dual_recovery: f64 = report
                .dual_star
                .iter()
                .zip(&instances[i])
                .map(|(d, p)| (d - p).abs())
                .fold(0.0, f64::max);
            let strict_support = instances[i].contains(&0.0);
            let pass = report.converged
                && report.max_residual <= 1e-8
                && dual_recovery <= 1e-8
                && (!strict_support || report.margin.map(|m| m > 1.0).unwrap_or(false))
                && (!strict_support
                    || report.undesired_spread.map(|s| s <= 1e-8).unwrap_or(false));
            all_pass &= pass;
            summary.push_str(&format!(
                "instance {i}: {} residual {:.3e} margin {} spread {} dual-recovery {:.3e}\n",
                if pass { "PASS" } else { "FAIL" },
                report.max_residual,
                report
                    .margin
                    .map(|m| format!("{m:.6}"))
                    .unwrap_or_else(|| "n/a".into()),
                report
                    .undesired_spread
                    .map(|s| format!("{s:.3e}"))
                    .unwrap_or_else(|| "n/a".into()),
                dual_recovery
            ));
            records.push(json!({
                "instance": i,
                "p_true": instances[i],
                "q_star": report.q_star,
                "p_star": report.p_star,
                "dual_star": report.dual_star,
                "max_residual": report.max_residual,
                "margin": report.margin,
                "undesired_spread": report.undesired_spread,
                "converged": report.converged,
                "iterations": report.iterations,
                "pass": pass,
            }));
        }
        run.write(
            "fixed_points.json",
            serde_json::to_string_pretty(&serde_json::Value::Array(records))
                .expect("reports serialize"),
        )?;
        run.write("theorem_summary.txt", summary)?;

        // Landscape cross-sections for the two-action instances.
        let grid = GridSpec {
            lo: spec.grid_lo,
            hi: spec.grid_hi,
            step: spec.grid_step,
        };
        let mut landscape_series = Vec::new();
        for (i, p) in instances.iter().enumerate().filter(|(_, p)| p.len() == 2) {
            let report = j_landscape(p, 0, grid)?;
            let mut csv = Csv::new(&["q_free", "j"]);
            for &(v, jv) in &report.samples {
                csv.row(&[fmt_float(v), fmt_float(jv)]);
            }
            run.write(&format!("landscape_{i}.csv"), csv.into_string())?;
            landscape_series.push(Series {
                label: format!("p_true=({:.2},{:.2})", p[0], p[1]),
                points: report
                    .samples
                    .iter()
                    .step_by(10)
                    .copied()
                    .collect(),
            });
        }
        if !landscape_series.is_empty() {
            run.write(
                "landscape.svg",
                line_chart(
                    "advantage objective, two-action cross-section",
                    "free utility (gauge: other = 0)",
                    "J",
                    &landscape_series,
                ),
            )?;
        }
        Ok(())
    })?;
    if all_pass {
        Ok(())
    } else {
        Err(CliError::CheckFailed(
            "one or more fixed-point certificates failed; see theorem_summary.txt".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn cmd_gradcheck(ctx: &Ctx) -> Result<(), CliError> {
    let mut pass = false;
    let mut residual = f64::INFINITY;
    with_run_dir(ctx, |run| {
        let task = ctx.task()?;
        let model = ctx.config.model.build(task.vocab_size(), ctx.seed)?;
        let mut rng = RngStream::new(ctx.seed, 0x6C);
        let batch: Vec<_> = (0..8).map(|_| task.sample_pair(&mut rng)).collect();
        let report = verify_gradient_identity(&model, &batch, 1e-5)?;
        residual = report.max_relative_residual;
        pass = residual <= 1e-4;
        run.write(
            "gradcheck.json",
            serde_json::to_string_pretty(&json!({
                "max_relative_residual": report.max_relative_residual,
                "max_abs_residual": report.max_abs_residual,
                "coordinates": report.coordinates,
                "tolerance": 1e-4,
                "pass": pass,
            }))
            .expect("gradcheck serializes"),
        )?;
        Ok(())
    })?;
    if pass {
        println!("gradcheck PASS: max relative residual {residual:.3e}");
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient identity residual {residual:.3e} exceeds 1e-4"
        )))
    }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

const EVAL_HEADER: [&str; 13] = [
    "rule",
    "scorer",
    "exact_match",
    "mean_utility",
    "mean_own_log10",
    "own_zero_count",
    "mean_ref_log10",
    "ref_zero_count",
    "mean_empty_log10",
    "empty_zero_count",
    "mean_seq_kl",
    "kl_zero_mass_count",
    "token_ece",
];

fn eval_table_csv(table: &EvalTable) -> String {
    let mut csv = Csv::new(&EVAL_HEADER);
    for row in &table.rows {
        csv.row(&[
            row.rule.clone(),
            row.scorer.clone(),
            fmt_float(row.exact_match),
            fmt_float(row.mean_utility),
            fmt_float(row.mean_own_log10),
            row.own_zero_count.to_string(),
            fmt_float(row.mean_ref_log10),
            row.ref_zero_count.to_string(),
            fmt_float(row.mean_empty_log10),
            row.empty_zero_count.to_string(),
            fmt_float(row.mean_seq_kl),
            row.kl_zero_mass_count.to_string(),
            fmt_float(row.token_ece),
        ]);
    }
    csv.into_string()
}

pub fn cmd_evaluate(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<(), CliError> {
    with_run_dir(ctx, |run| {
        let task = ctx.task()?;
        let model = load_model_for_task(&ctx.checkpoint_path(checkpoint), &task)?;
        let table = evaluate_decoders(
            &model,
            &task,
            &ctx.config.decode.scorers()?,
            &ctx.config.decode.rules()?,
            ctx.config.eval_instances(),
            ctx.seed,
            &ctx.utility(),
            DEFAULT_SUPPORT_CAP,
        )?;
        run.write("eval_table.csv", eval_table_csv(&table))?;
        let rows: Vec<_> = table
            .rows
            .iter()
            .map(|r| {
                json!({
                    "rule": r.rule,
                    "scorer": r.scorer,
                    "exact_match": r.exact_match,
                    "mean_utility": r.mean_utility,
                    "mean_own_log10": json_float(r.mean_own_log10),
                    "own_zero_count": r.own_zero_count,
                    "mean_ref_log10": json_float(r.mean_ref_log10),
                    "ref_zero_count": r.ref_zero_count,
                    "mean_empty_log10": json_float(r.mean_empty_log10),
                    "empty_zero_count": r.empty_zero_count,
                    "mean_seq_kl": json_float(r.mean_seq_kl),
                    "kl_zero_mass_count": r.kl_zero_mass_count,
                    "token_ece": r.token_ece,
                })
            })
            .collect();
        run.write(
            "eval_table.json",
            serde_json::to_string_pretty(&json!({
                "instances": table.instances,
                "rows": rows,
            }))
            .expect("table serializes"),
        )?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(ctx: &Ctx) -> Result<(), CliError> {
    let dir = ctx.out.clone();
    let mut rendered = 0usize;
    let mut missing: Vec<&str> = Vec::new();
    let mut run = RunDir::create(&dir)?;
    let mut summary = String::new();

    // Sweep curves: one series per lambda.
    let sweep_path = dir.join("sweep_log.csv");
    if sweep_path.exists() {
        let text = std::fs::read_to_string(&sweep_path)?;
        let (header, rows) =
            parse_csv(&text).ok_or_else(|| CliError::Usage("sweep_log.csv is empty".into()))?;
        let col = |name: &str| header.iter().position(|h| h == name);
        let (li, si, ei, ji) = match (
            col("lambda"),
            col("step"),
            col("probe_exact_match"),
            col("j_token"),
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(CliError::Usage("sweep_log.csv has unexpected columns".into())),
        };
        let mut lambdas: Vec<String> = Vec::new();
        for row in &rows {
            if !lambdas.contains(&row[li]) {
                lambdas.push(row[li].clone());
            }
        }
        for (title, y_label, column, name) in [
            (
                "greedy exact match vs step",
                "exact match",
                ei,
                "sweep_exact_match.svg",
            ),
            ("j_token vs step", "j_token", ji, "sweep_j_token.svg"),
        ] {
            let series: Vec<Series> = lambdas
                .iter()
                .map(|lambda| Series {
                    label: format!("lambda={}", parse_float(lambda).unwrap_or(f64::NAN)),
                    points: rows
                        .iter()
                        .filter(|r| &r[li] == lambda)
                        .filter_map(|r| {
                            Some((parse_float(&r[si])?, parse_float(&r[column])?))
                        })
                        .collect(),
                })
                .collect();
            run.write(name, line_chart(title, "step", y_label, &series))?;
        }
        summary.push_str(&format!(
            "sweep: {} lambda values, final exact match per lambda:\n",
            lambdas.len()
        ));
        for lambda in &lambdas {
            let last = rows.iter().rev().find(|r| &r[li] == lambda);
            if let Some(r) = last {
                summary.push_str(&format!("  lambda {:>6}: {}\n", lambda, r[ei].clone()));
            }
        }
        rendered += 1;
    } else {
        missing.push("sweep_log.csv");
    }

    // Training curves.
    let train_path = dir.join("train_log.csv");
    if train_path.exists() {
        let text = std::fs::read_to_string(&train_path)?;
        if let Some((header, rows)) = parse_csv(&text) {
            let col = |name: &str| header.iter().position(|h| h == name);
            if let (Some(si), Some(ji), Some(ei)) =
                (col("step"), col("j_token"), col("probe_exact_match"))
            {
                let series = vec![
                    Series {
                        label: "j_token".into(),
                        points: rows
                            .iter()
                            .filter_map(|r| Some((parse_float(&r[si])?, parse_float(&r[ji])?)))
                            .collect(),
                    },
                    Series {
                        label: "exact match".into(),
                        points: rows
                            .iter()
                            .filter_map(|r| Some((parse_float(&r[si])?, parse_float(&r[ei])?)))
                            .collect(),
                    },
                ];
                run.write(
                    "train_curves.svg",
                    line_chart("training curves", "step", "value", &series),
                )?;
                rendered += 1;
            }
        }
    } else {
        missing.push("train_log.csv");
    }

    // Evaluation table: beam-size curves per scorer plus a text table.
    let eval_path = dir.join("eval_table.csv");
    if eval_path.exists() {
        let text = std::fs::read_to_string(&eval_path)?;
        let (header, rows) =
            parse_csv(&text).ok_or_else(|| CliError::Usage("eval_table.csv is empty".into()))?;
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Usage(format!("eval_table.csv missing column {name}")))
        };
        let (ri, sci, emi, oli) = (
            col("rule")?,
            col("scorer")?,
            col("exact_match")?,
            col("mean_own_log10")?,
        );
        let (rli, rzi, eli, ezi) = (
            col("mean_ref_log10")?,
            col("ref_zero_count")?,
            col("mean_empty_log10")?,
            col("empty_zero_count")?,
        );
        let short = |cell: &str| match parse_float(cell) {
            Some(v) if v.is_finite() => format!("{v:.4}"),
            Some(_) => "-inf".to_string(),
            None => cell.to_string(),
        };
        for scorer in ["softmax", "dual"] {
            let scorer_rows: Vec<&Vec<String>> =
                rows.iter().filter(|r| r[sci] == scorer).collect();
            if scorer_rows.is_empty() {
                continue;
            }
            summary.push_str(&format!(
                "\nevaluation under the {scorer} scorer (exact match | mean log10 P):\n"
            ));
            for row in &scorer_rows {
                summary.push_str(&format!(
                    "  {:<16} {:>10} {:>10}\n",
                    row[ri],
                    short(&row[emi]),
                    short(&row[oli])
                ));
            }
            // The empty output and the reference draws share one row per
            // scorer.
            let first = scorer_rows[0];
            summary.push_str(&format!(
                "  {:<16} {:>10} {:>10}   (zero probability on {} instances)\n",
                "empty output",
                "-",
                short(&first[eli]),
                first[ezi]
            ));
            summary.push_str(&format!(
                "  {:<16} {:>10} {:>10}   (zero probability on {} instances)\n",
                "reference draw",
                "-",
                short(&first[rli]),
                first[rzi]
            ));
        }
        for scorer in ["softmax", "dual"] {
            let beam_rows: Vec<&Vec<String>> = rows
                .iter()
                .filter(|r| r[sci] == scorer && r[ri].starts_with("beam("))
                .collect();
            if beam_rows.is_empty() {
                continue;
            }
            let beam_size = |rule: &str| -> Option<f64> {
                rule.strip_prefix("beam(")?.strip_suffix(")")?.parse().ok()
            };
            let series = vec![
                Series {
                    label: "exact match".into(),
                    points: beam_rows
                        .iter()
                        .filter_map(|r| Some((beam_size(&r[ri])?, parse_float(&r[emi])?)))
                        .collect(),
                },
                Series {
                    label: "mean log10 P".into(),
                    points: beam_rows
                        .iter()
                        .filter_map(|r| Some((beam_size(&r[ri])?, parse_float(&r[oli])?)))
                        .collect(),
                },
            ];
            run.write(
                &format!("beam_curves_{scorer}.svg"),
                line_chart(
                    &format!("beam search under the {scorer} scorer"),
                    "beam size",
                    "value",
                    &series,
                ),
            )?;
        }
        rendered += 1;
    } else {
        missing.push("eval_table.csv");
    }

    if !missing.is_empty() {
        summary.push_str("\nskipped (missing inputs):\n");
        for m in &missing {
            summary.push_str(&format!("  {m}\n"));
        }
    }
    run.write("summary.txt", summary)?;
    run.finish(&ctx.config_json, missing.is_empty(), None)?;

    if rendered == 0 {
        return Err(CliError::Usage(format!(
            "nothing to report in {}: expected sweep_log.csv, train_log.csv, or eval_table.csv",
            dir.display()
        )));
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "report rendered {rendered} section(s); missing inputs: {}",
            missing.join(", ")
        )))
    }
}
