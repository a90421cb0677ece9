//! Subcommand implementations. Each writes its files under the configured
//! output directory and a human-readable summary to `log`.

use std::io::Write;
use std::path::Path;

use miqrec_core::data::{
    build_sequences, dataset_stats, kcore_filter, leave_one_out_split, suggest_query_window, DatasetStats, Phase,
    QueryWindowSuggestion, SplitSet,
};
use miqrec_core::eval::{evaluate, MetricReport, DEFAULT_CUTOFFS};
use miqrec_core::gradcheck::{check_model, check_ops, GroupError, OpCheck};
use miqrec_core::train::{fit, EpochRecord, TrainHistory};
use miqrec_core::{OpKind, SeqRecModel};

use crate::bench::{bench_csv, exponents, run_grid, BenchRow};
use crate::cache::{self, Dataset};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::read_interactions;
use crate::fsio::write_atomic;
use crate::report::{history_csv, report_csv, stats_csv, sweep_csv, SweepCell};
use crate::threads::Threaded;

pub const DATASET_FILE: &str = "dataset.miqd";
pub const STATS_FILE: &str = "stats.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CHECKPOINT_FILE: &str = "best.miqr";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Largest model `gradcheck` accepts.
pub const GRADCHECK_MAX_D: usize = 16;
pub const GRADCHECK_MAX_LEN: usize = 8;

fn say(log: &mut dyn Write, text: impl AsRef<str>) {
    // console output is best effort
    let _ = writeln!(log, "{}", text.as_ref());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn stats_table(name: &str, s: &DatasetStats) -> String {
    format!(
        "dataset   #users   #items   avg actions/user   avg actions/item   #actions\n{name:<9} {:>6}   {:>6}   {:>16.1}   {:>16.1}   {:>8}",
        s.users, s.items, s.avg_actions_user, s.avg_actions_item, s.actions
    )
}

/// Parses, k-core filters and caches an interaction file.
pub fn ingest(cfg: &RunConfig, input: &Path, log: &mut dyn Write) -> Result<DatasetStats> {
    let raw = read_interactions(input, cfg.format)?;
    let filtered =
        kcore_filter(&raw, cfg.kcore).map_err(|source| CliError::InFile { path: input.to_path_buf(), source })?;
    let name = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let stats = dataset_stats(&filtered)?;
    cache::save(&cfg.data_path(), &Dataset { name: name.clone(), log: filtered })?;
    write_text(&cfg.out.join(STATS_FILE), &stats_csv(&name, &stats))?;
    say(log, stats_table(&name, &stats));
    Ok(stats)
}

/// Loads the cached dataset and builds its leave-one-out split.
pub fn load_split(path: &Path) -> Result<(Dataset, SplitSet)> {
    let ds = cache::load(path)?;
    let seqs = build_sequences(&ds.log).map_err(|source| CliError::InFile { path: path.to_path_buf(), source })?;
    if seqs.is_empty() {
        return Err(CliError::InFile { path: path.to_path_buf(), source: miqrec_core::Error::EmptyLog });
    }
    let split = leave_one_out_split(&seqs, ds.log.n_items())?;
    Ok((ds, split))
}

pub fn evaluate_phases(model: &SeqRecModel, split: &SplitSet, exclude_history: bool) -> Result<Vec<MetricReport>> {
    let exec = Threaded::from_env();
    [Phase::Valid, Phase::Test]
        .iter()
        .map(|&p| Ok(evaluate(model, split, p, &DEFAULT_CUTOFFS, exclude_history, &exec)?))
        .collect()
}

fn report_lines(reports: &[MetricReport]) -> String {
    reports
        .iter()
        .flat_map(|r| {
            r.cutoffs
                .iter()
                .map(move |c| format!("{:<5} HR@{:<2} {:.4}  NDCG@{:<2} {:.4}", r.phase.name(), c.k, c.hr, c.k, c.ndcg))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best: SeqRecModel,
    pub reports: Vec<MetricReport>,
}

/// Trains on `split` without touching the filesystem.
pub fn train_in_memory(
    cfg: &RunConfig,
    split: &SplitSet,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut model = SeqRecModel::init(cfg.model_for(split.n_items)?)?;
    let exec = Threaded::from_env();
    let out = fit(&mut model, split, &cfg.train, &exec, |r| on_epoch(r))?;
    let reports = evaluate_phases(&out.best, split, cfg.train.exclude_history)?;
    Ok(TrainOutcome { history: out.history, best: out.best, reports })
}

/// Trains, keeping the history CSV even when training fails.
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    let (_, split) = load_split(&cfg.data_path())?;
    let mut records = Vec::new();
    let result = train_in_memory(cfg, &split, |r| {
        records.push(*r);
        match r.validation {
            Some((hr, ndcg)) => {
                say(log, format!("epoch {:>4}  loss {:.5}  val HR@10 {hr:.4}  NDCG@10 {ndcg:.4}", r.epoch, r.loss))
            }
            None => say(log, format!("epoch {:>4}  loss {:.5}", r.epoch, r.loss)),
        }
    });
    write_text(&cfg.out.join(HISTORY_FILE), &history_csv(&records))?;
    let out = result?;
    checkpoint::save(&cfg.checkpoint_path(), &out.best)?;
    write_text(&cfg.out.join(REPORT_FILE), &report_csv(&out.reports))?;
    say(log, report_lines(&out.reports));
    Ok(out)
}

/// Evaluates a checkpoint on the cached dataset.
pub fn eval(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<MetricReport>> {
    let (_, split) = load_split(&cfg.data_path())?;
    let path = cfg.checkpoint_path();
    let model = checkpoint::load(&path)?;
    if model.config().n_items != split.n_items {
        return Err(CliError::Format {
            path,
            message: format!("checkpoint has {} items, dataset has {}", model.config().n_items, split.n_items),
        });
    }
    let reports = evaluate_phases(&model, &split, cfg.train.exclude_history)?;
    write_text(&cfg.out.join(REPORT_FILE), &report_csv(&reports))?;
    say(log, report_lines(&reports));
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub ops: Vec<OpCheck>,
    pub groups: Vec<GroupError>,
}

impl GradcheckOutcome {
    pub fn failing_ops(&self) -> Vec<String> {
        self.ops.iter().filter(|c| !c.passed()).map(|c| c.op.to_string()).collect()
    }

    pub fn failing_groups(&self) -> Vec<String> {
        self.groups.iter().filter(|g| !g.passed()).map(|g| g.name.clone()).collect()
    }
}

/// Finite-difference check of every op pullback and of every parameter
/// matrix of a tiny model. `fault` corrupts one op's pullback.
pub fn gradcheck(cfg: &RunConfig, fault: Option<OpKind>, log: &mut dyn Write) -> Result<GradcheckOutcome> {
    let c = cfg.model_for(cfg.gradcheck_items)?;
    if c.d > GRADCHECK_MAX_D || c.max_len > GRADCHECK_MAX_LEN {
        return Err(CliError::Config(format!(
            "gradcheck needs d <= {GRADCHECK_MAX_D} and max_len <= {GRADCHECK_MAX_LEN} (got d = {}, max_len = {})",
            c.d, c.max_len
        )));
    }
    let ops = check_ops(c.seed, fault)?;
    let groups = check_model(&c, c.seed, fault)?;
    let mut csv = String::from("kind,name,max_rel_error,pass\n");
    for o in &ops {
        csv.push_str(&format!("op,{},{},{}\n", o.op, o.max_rel_error, o.passed()));
    }
    for g in &groups {
        csv.push_str(&format!("param,{},{},{}\n", g.name, g.max_rel_error, g.passed()));
    }
    write_text(&cfg.out.join(GRADCHECK_FILE), &csv)?;
    for g in &groups {
        say(
            log,
            format!(
                "{:<28} {:>5} entries  max rel err {:.3e}  {}",
                g.name,
                g.entries,
                g.max_rel_error,
                if g.passed() { "ok" } else { "FAIL" }
            ),
        );
    }
    let out = GradcheckOutcome { ops, groups };
    say(log, format!("{} ops, {} parameter groups checked", out.ops.len(), out.groups.len()));
    let (bad_ops, bad_groups) = (out.failing_ops(), out.failing_groups());
    if !bad_ops.is_empty() || !bad_groups.is_empty() {
        return Err(CliError::Verification(format!(
            "gradient mismatch in ops [{}], parameters [{}]",
            bad_ops.join(", "),
            bad_groups.join(", ")
        )));
    }
    Ok(out)
}

/// Scaling grid over `(T, d, m)`; fails on any closed-form mismatch.
pub fn bench(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<BenchRow>> {
    let rows =
        run_grid(&cfg.bench_t, &cfg.bench_d, &cfg.bench_m, cfg.model.aggregator, cfg.model.blocks, cfg.model.seed)?;
    write_text(&cfg.out.join(BENCH_FILE), &bench_csv(&rows))?;
    let (attn, agg) = exponents(&rows);
    let show = |v: &[f64]| v.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(" ");
    say(log, format!("{} grid points; attention-term exponents in T': {}", rows.len(), show(&attn)));
    say(log, format!("aggregation-term exponents in m ({}): {}", cfg.model.aggregator, show(&agg)));
    if let Some(bad) = rows.iter().find(|r| !r.consistent()) {
        return Err(CliError::Verification(format!(
            "closed form disagrees with counters at T = {}, d = {}, m = {}: {}",
            bad.t,
            bad.d,
            bad.m,
            bad.csv_line()
        )));
    }
    Ok(rows)
}

pub fn suggest_m(cfg: &RunConfig, log: &mut dyn Write) -> Result<QueryWindowSuggestion> {
    let ds = cache::load(&cfg.data_path())?;
    let stats = dataset_stats(&ds.log)?;
    let s = suggest_query_window(&stats);
    say(log, format!("avg actions per user {:.1}: suggested m = {}", stats.avg_actions_user, s.m));
    if let Some(w) = s.warning {
        say(log, format!("warning: {w}"));
    }
    Ok(s)
}

/// Trains one model per `(m, d)` cell and records test metrics. A failing
/// cell leaves empty metric fields and the sweep continues.
pub fn sweep(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<SweepCell>> {
    let (_, split) = load_split(&cfg.data_path())?;
    let mut cells = Vec::new();
    for &m in &cfg.sweep_m {
        for &d in &cfg.sweep_d {
            let mut c = cfg.clone();
            c.model.m = m;
            c.model.d = d;
            let metrics = match train_in_memory(&c, &split, |_| {}) {
                Ok(out) => {
                    let test = out.reports.iter().find(|r| r.phase == Phase::Test).expect("test phase evaluated");
                    let (k5, k10) = (test.at(5).expect("cutoff 5"), test.at(10).expect("cutoff 10"));
                    say(log, format!("m {m:>3}  d {d:>4}  test HR@10 {:.4}  NDCG@10 {:.4}", k10.hr, k10.ndcg));
                    Some([k5.hr, k10.hr, k5.ndcg, k10.ndcg])
                }
                Err(e) => {
                    say(log, format!("m {m:>3}  d {d:>4}  failed: {e}"));
                    None
                }
            };
            cells.push(SweepCell { m, d, metrics });
        }
    }
    write_text(&cfg.out.join(SWEEP_FILE), &sweep_csv(&cells))?;
    Ok(cells)
}
