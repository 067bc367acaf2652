//! The experiment driver: full training runs with metric emission,
//! checkpointing, and bank persistence. Fully reproducible from
//! (config, seed) apart from wall-clock fields.

use super::{
    collect_group, evaluate, gap_profiles, io_err, task_stream, train_step, Adam, MetricsRecord,
    RolloutGroup, TrainConfig, TrainError,
};
use crate::env::Catalog;
use crate::numkit::RngStream;
use crate::policy::{save_params, PolicyParams, PolicySnapshot, SnapshotRole};
use crate::skillbank::SkillBank;
use crate::trainer::metrics::CSV_HEADER;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

/// Cadence of the gap-profile records (scalar metrics are every step).
const PROFILE_EVERY: usize = 10;

#[derive(Debug)]
pub struct RunOutput {
    pub params: PolicyParams,
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub final_success: Option<f64>,
}

struct Sink {
    path: PathBuf,
    file: fs::File,
}

impl Sink {
    fn create(path: PathBuf) -> Result<Self, TrainError> {
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        Ok(Self { path, file })
    }

    fn line(&mut self, text: &str) -> Result<(), TrainError> {
        self.file
            .write_all(text.as_bytes())
            .and_then(|_| self.file.write_all(b"\n"))
            .map_err(io_err(&self.path))
    }
}

pub fn run(config: &TrainConfig) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let kind = config.env_kind()?;
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;

    let resolved_path = out_dir.join("resolved_config.json");
    fs::write(&resolved_path, serde_json::to_string_pretty(config)?)
        .map_err(io_err(&resolved_path))?;

    let catalog = Catalog::builtin(kind);
    let catalog_path = out_dir.join("catalog.json");
    fs::write(&catalog_path, catalog.to_json()).map_err(io_err(&catalog_path))?;

    let mut bank = SkillBank::from_catalog(&catalog, config.c_ucb);
    let mut params = PolicyParams::init(catalog.vocab.size(), config.hidden, config.seed);
    params.seed = config.seed;
    let ref_snapshot = PolicySnapshot::of(&params, SnapshotRole::Reference);
    let mut optim = Adam::new(&params, config.adam, config.learning_rate);

    let eval_tasks: Vec<String> = match &config.eval_tasks {
        Some(list) => list.clone(),
        None => catalog.task_ids(),
    };
    for task in &eval_tasks {
        catalog.find(task)?;
    }

    let mut metrics = Sink::create(out_dir.join("metrics.jsonl"))?;
    let mut summary = Sink::create(out_dir.join("summary.csv"))?;
    summary.line(CSV_HEADER)?;
    let mut profiles_sink = Sink::create(out_dir.join("gap_profiles.jsonl"))?;

    let ckpt0 = out_dir.join("checkpoint_step0.bin");
    save_params(&params, &ckpt0)?;

    let all_tasks = catalog.task_ids();
    let mut task_rng = RngStream::new(config.seed, task_stream());
    let mut records: Vec<MetricsRecord> = Vec::with_capacity(config.steps);
    let mut final_success = None;

    for step in 1..=config.steps {
        let clock = Instant::now();
        let mut batch: Vec<RolloutGroup> = Vec::with_capacity(config.tasks_per_batch);
        for task_idx in 0..config.tasks_per_batch {
            let task_id = &all_tasks[task_rng.index(all_tasks.len())];
            batch.push(collect_group(
                &params,
                &catalog,
                task_id,
                &config.method,
                &mut bank,
                Some(&ref_snapshot),
                config.group_size,
                config.seed,
                step,
                task_idx,
            )?);
        }
        let reward_sum: f64 = batch
            .iter()
            .flat_map(|g| &g.trajectories)
            .map(|t| t.reward)
            .sum();
        let n_trajs = (config.tasks_per_batch * config.group_size) as f64;
        let reward_mean = reward_sum / n_trajs;

        let out = train_step(&mut params, &mut optim, &batch, &config.method, config.grad_clip, step)?;

        let is_eval = step % config.eval_every == 0 || step == config.steps;
        let success_rate = if is_eval {
            let (rate, _) = evaluate(&params, &catalog, &eval_tasks, &bank, config.eval_with_skills, config.seed, step)?;
            final_success = Some(rate);
            let ckpt = out_dir.join(format!("checkpoint_step{step}.bin"));
            save_params(&params, &ckpt)?;
            Some(rate)
        } else {
            None
        };

        if step % PROFILE_EVERY == 0 && config.method.needs_teacher() {
            let profile = gap_profiles(&batch, step)?;
            profiles_sink.line(&serde_json::to_string(&profile)?)?;
        }

        let stats_path = out_dir.join("bank_stats.json");
        fs::write(&stats_path, bank.stats_json()).map_err(io_err(&stats_path))?;

        let record = MetricsRecord {
            step,
            reward_mean,
            success_rate,
            loss_total: out.report.total,
            loss_grpo: out.report.grpo,
            loss_kl_ref: out.report.kl_ref,
            loss_distill: out.report.distill,
            gap_mean: out.report.gap_mean,
            gate_mean: out.report.gate_mean,
            gate_active_ratio: out.report.gate_active_ratio,
            grad_norm: out.grad_norm,
            ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        metrics.line(&serde_json::to_string(&record)?)?;
        summary.line(&record.csv_line())?;
        records.push(record);
    }

    let final_ckpt = out_dir.join(format!("checkpoint_step{}.bin", config.steps));
    save_params(&params, &final_ckpt)?;

    Ok(RunOutput {
        params,
        metrics_path: metrics.path.clone(),
        summary_path: summary.path.clone(),
        out_dir,
        records,
        final_success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use crate::losses::Method;

    fn tiny_config(method: Method, dir: &std::path::Path) -> TrainConfig {
        let mut cfg = TrainConfig::new(method, EnvKind::TreasureRooms, 3, dir.to_str().unwrap());
        cfg.steps = 3;
        cfg.tasks_per_batch = 2;
        cfg.group_size = 4;
        cfg.hidden = 16;
        cfg.eval_every = 2;
        cfg
    }

    #[test]
    fn zero_step_run_writes_initial_checkpoint_and_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(Method::Grpo, dir.path());
        cfg.steps = 0;
        let out = run(&cfg).unwrap();
        assert!(out.records.is_empty());
        assert!(dir.path().join("checkpoint_step0.bin").exists());
        assert_eq!(fs::read_to_string(out.metrics_path).unwrap(), "");
        let summary = fs::read_to_string(out.summary_path).unwrap();
        assert_eq!(summary.trim(), CSV_HEADER);
    }

    #[test]
    fn run_emits_one_record_per_step_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Method::Sdar, dir.path());
        let out = run(&cfg).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.records.iter().all(|r| (0.0..=1.0).contains(&r.reward_mean)));
        assert!(out.records[1].success_rate.is_some()); // step 2 eval
        assert!(out.records[2].success_rate.is_some()); // final step
        assert!(dir.path().join("checkpoint_step2.bin").exists());
        assert!(dir.path().join("checkpoint_step3.bin").exists());
        assert!(dir.path().join("resolved_config.json").exists());
        assert!(dir.path().join("catalog.json").exists());
        assert!(dir.path().join("bank_stats.json").exists());
        // SDAR records carry gap statistics.
        assert!(out.records.iter().all(|r| r.gap_mean.is_some()));
    }

    #[test]
    fn reruns_are_identical_apart_from_wall_clock() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let out1 = run(&tiny_config(Method::Sdar, d1.path())).unwrap();
        let out2 = run(&tiny_config(Method::Sdar, d2.path())).unwrap();
        let strip = |path: &std::path::Path| -> Vec<String> {
            fs::read_to_string(path)
                .unwrap()
                .lines()
                .map(|l| {
                    let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                    v.as_object_mut().unwrap().remove("ms");
                    serde_json::to_string(&v).unwrap()
                })
                .collect()
        };
        assert_eq!(strip(&out1.metrics_path), strip(&out2.metrics_path));
        assert_eq!(out1.params.block, out2.params.block);
    }

    #[test]
    fn missing_eval_task_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(Method::Grpo, dir.path());
        cfg.eval_tasks = Some(vec!["put_moon_sky".into()]);
        assert!(run(&cfg).is_err());
    }
}
