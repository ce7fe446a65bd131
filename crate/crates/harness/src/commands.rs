use std::path::Path;
use std::time::Instant;

use evifed_core::checkpoint::Checkpoint;
use evifed_federation::export::{checkpoint, round_rows, rounds_csv, run_json, to_csv};
use evifed_federation::run::generate_data;
use evifed_federation::{
    cross_evaluate, run_federation, ClientState, FedConfig, RoundLog, RunOptions, RunOutput, Variant,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{peak_rss_kib, sha256_hex, unix_seconds, OutputDir, RunManifest, Timing, TIMING};
use crate::cli::{Cli, Command, GlobalArgs};
use crate::config;
use crate::error::{HarnessError, Result};

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const RUN_JSON: &str = "run.json";
pub const CHECKPOINT: &str = "checkpoint.evck";

/// Ablation variants in reporting order.
pub const ABLATION: [(&str, Variant); 4] = [
    ("full", Variant::Dluc),
    ("no-client", Variant::Pooled),
    ("no-server", Variant::Isolated),
    ("no-dluc", Variant::Uniform),
];

pub fn execute(cli: &Cli) -> Result<RunManifest> {
    let g = &cli.global;
    match &cli.command {
        Command::Run { variant } => cmd_run(g, (*variant).into()),
        Command::Ablate { seeds } => cmd_ablate(g, *seeds),
        Command::SweepMu { values, seeds } => cmd_sweep_mu(g, values, *seeds),
        Command::Stress { clients, rounds } => cmd_stress(g, *clients, *rounds),
        Command::CrossEval { run_dir } => cmd_cross_eval(g, run_dir),
        Command::ExportPlots { run_dir } => cmd_export_plots(g, run_dir),
    }
}

/// Sample mean and unbiased variance; the variance of one value is 0.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// `cfg` with every seed shifted by `k`.
pub fn with_seed_offset(cfg: &FedConfig, k: u64) -> FedConfig {
    let mut c = cfg.clone();
    c.seed_data = c.seed_data.wrapping_add(k);
    c.seed_init = c.seed_init.wrapping_add(k);
    c.seed_shuffle = c.seed_shuffle.wrapping_add(k);
    c
}

struct Clock {
    started: f64,
    instant: Instant,
}

impl Clock {
    fn start() -> Self {
        Self {
            started: unix_seconds(),
            instant: Instant::now(),
        }
    }

    fn write(&self, args: &GlobalArgs, command: &str, logs: &[RoundLog]) -> Result<()> {
        if !args.timing {
            return Ok(());
        }
        let timing = Timing {
            command: command.to_string(),
            started_unix: self.started,
            finished_unix: unix_seconds(),
            total_seconds: self.instant.elapsed().as_secs_f64(),
            round_seconds: logs.iter().map(|l| l.duration.as_secs_f64()).collect(),
            peak_rss_kib: peak_rss_kib(),
        };
        std::fs::write(args.out_dir.join(TIMING), serde_json::to_string_pretty(&timing)? + "\n")?;
        Ok(())
    }
}

fn check_seeds(seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(HarnessError::Config("--seeds must be at least 1".into()));
    }
    Ok(())
}

pub fn cmd_run(args: &GlobalArgs, variant: Variant) -> Result<RunManifest> {
    let cfg = config::load(args)?;
    let clock = Clock::start();
    let out = run_federation(&cfg, variant, RunOptions::default())?;
    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write(ROUNDS_CSV, rounds_csv(&out.logs).as_bytes())?;
    dir.write(RUN_JSON, run_json(&cfg, &out)?.as_bytes())?;
    dir.write(CHECKPOINT, &checkpoint(&cfg, &out.clients)?.to_bytes())?;
    let manifest = dir.finish("run", json!({ "variant": variant.name() }), &cfg)?;
    clock.write(args, "run", &out.logs)?;
    println!(
        "{}: final accuracy {:.4} over {} clients, {} rounds -> {}",
        variant.name(),
        out.final_accuracy(),
        cfg.clients,
        cfg.rounds,
        args.out_dir.display()
    );
    Ok(manifest)
}

/// Per-seed final accuracies of one group of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub name: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl SeedSummary {
    pub fn new(name: impl Into<String>, per_seed: Vec<f64>) -> Self {
        let (mean, variance) = mean_variance(&per_seed);
        Self {
            name: name.into(),
            per_seed,
            mean,
            variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seeds: u64,
    pub variants: Vec<SeedSummary>,
    /// Paired per-seed differences of the full method against each baseline.
    pub deltas: Vec<SeedSummary>,
}

pub fn cmd_ablate(args: &GlobalArgs, seeds: u64) -> Result<RunManifest> {
    check_seeds(seeds)?;
    let cfg = config::load(args)?;
    let clock = Clock::start();
    let mut rows = Vec::new();
    let mut finals = vec![Vec::new(); ABLATION.len()];
    let mut first_logs = None;
    for k in 0..seeds {
        let c = with_seed_offset(&cfg, k);
        for (i, (name, variant)) in ABLATION.iter().enumerate() {
            let out = run_federation(&c, *variant, RunOptions::default())?;
            rows.extend(round_rows(&out.logs, &[name.to_string(), k.to_string()]));
            finals[i].push(out.final_accuracy());
            first_logs.get_or_insert(out.logs);
        }
    }
    let variants: Vec<SeedSummary> =
        ABLATION.iter().zip(&finals).map(|((name, _), f)| SeedSummary::new(*name, f.clone())).collect();
    let deltas = (1..ABLATION.len())
        .map(|i| {
            let d = finals[0].iter().zip(&finals[i]).map(|(a, b)| a - b).collect();
            SeedSummary::new(format!("full_minus_{}", ABLATION[i].0.replace('-', "_")), d)
        })
        .collect();
    let summary = AblationSummary {
        seeds,
        variants,
        deltas,
    };

    let mut table = String::from("variant,mean_accuracy,variance,seeds\n");
    for v in &summary.variants {
        table.push_str(&format!("{},{},{},{}\n", v.name, v.mean, v.variance, seeds));
    }
    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write("ablation_rounds.csv", to_csv(&["variant", "seed"], &rows).as_bytes())?;
    dir.write("ablation.csv", table.as_bytes())?;
    dir.write_json("ablation_summary.json", &summary)?;
    let manifest = dir.finish("ablate", json!({ "seeds": seeds }), &cfg)?;
    clock.write(args, "ablate", first_logs.as_deref().unwrap_or_default())?;

    println!("{:<10} {:>10} {:>12}", "variant", "mean acc", "variance");
    for v in summary.variants.iter().chain(&summary.deltas) {
        println!("{:<10} {:>10.4} {:>12.3e}", v.name, v.mean, v.variance);
    }
    Ok(manifest)
}

pub fn cmd_sweep_mu(args: &GlobalArgs, values: &[f64], seeds: u64) -> Result<RunManifest> {
    check_seeds(seeds)?;
    if values.len() < 2 {
        return Err(HarnessError::Config(format!("--values needs at least 2 rates, got {}", values.len())));
    }
    let cfg = config::load(args)?;
    let clock = Clock::start();
    let mut rows = Vec::new();
    let mut summary = String::from("mu,seeds,mean_accuracy,variance\n");
    let mut first_logs = None;
    for &mu in values {
        let mut finals = Vec::new();
        for k in 0..seeds {
            let mut c = with_seed_offset(&cfg, k);
            c.mu = mu;
            c.validate().map_err(|e| HarnessError::Config(format!("--values {mu}: {e}")))?;
            let out = run_federation(&c, Variant::Dluc, RunOptions::default())?;
            rows.extend(round_rows(&out.logs, &[mu.to_string(), k.to_string()]));
            finals.push(out.final_accuracy());
            first_logs.get_or_insert(out.logs);
        }
        let (mean, var) = mean_variance(&finals);
        summary.push_str(&format!("{mu},{seeds},{mean},{var}\n"));
        println!("mu {mu:<8} mean accuracy {mean:.4} (variance {var:.3e})");
    }
    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write("sweep_mu.csv", to_csv(&["mu", "seed"], &rows).as_bytes())?;
    dir.write("sweep_mu_summary.csv", summary.as_bytes())?;
    let manifest = dir.finish("sweep-mu", json!({ "values": values, "seeds": seeds }), &cfg)?;
    clock.write(args, "sweep-mu", first_logs.as_deref().unwrap_or_default())?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub clients: usize,
    pub rounds: usize,
    pub prompt_scalars_per_client: usize,
    pub head_scalars_per_client: usize,
    /// Closed-form prompt plus head count.
    pub trainable_per_client: usize,
    /// Sum of the trainable scalars actually held by the clients.
    pub counted_total: usize,
    pub formula_total: usize,
    /// Scalars in one client's publication: its prompts plus two summaries.
    pub publish_scalars_per_client: usize,
    pub traffic_bytes: usize,
    pub final_accuracy: f64,
}

pub fn stress_report(cfg: &FedConfig, out: &RunOutput) -> Result<StressReport> {
    let prompt = out.clients[0].prompts.len();
    let head = out.clients[0].head.len();
    if out.clients.iter().any(|c| c.prompts.len() != prompt || c.head.len() != head) {
        return Err(HarnessError::Runtime("clients hold differently sized state".into()));
    }
    Ok(StressReport {
        clients: cfg.clients,
        rounds: cfg.rounds,
        prompt_scalars_per_client: prompt,
        head_scalars_per_client: head,
        trainable_per_client: cfg.trainable_per_client(),
        counted_total: out.clients.iter().map(ClientState::trainable_count).sum(),
        formula_total: cfg.clients * cfg.trainable_per_client(),
        publish_scalars_per_client: prompt + 2,
        traffic_bytes: out.traffic_bytes,
        final_accuracy: out.final_accuracy(),
    })
}

pub fn cmd_stress(args: &GlobalArgs, clients: usize, rounds: usize) -> Result<RunManifest> {
    if clients < 100 {
        return Err(HarnessError::Config(format!("--clients must be at least 100, got {clients}")));
    }
    let mut cfg = match args.config {
        Some(_) => config::load(args)?,
        None => {
            let mut c = FedConfig::new(clients);
            config::apply_overrides(&mut c, args);
            c
        }
    };
    cfg.clients = clients;
    cfg.rounds = rounds;
    cfg.validate()?;
    let clock = Clock::start();
    let opts = RunOptions {
        skip_cross_eval: true,
        ..RunOptions::default()
    };
    let out = run_federation(&cfg, Variant::Dluc, opts)?;
    let wall = clock.instant.elapsed().as_secs_f64();
    let report = stress_report(&cfg, &out)?;
    if report.counted_total != report.formula_total {
        return Err(HarnessError::Runtime(format!(
            "trainable scalars {} differ from the closed form {}",
            report.counted_total, report.formula_total
        )));
    }
    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write(ROUNDS_CSV, rounds_csv(&out.logs).as_bytes())?;
    dir.write_json("stress.json", &report)?;
    let manifest = dir.finish("stress", json!({ "clients": clients, "rounds": rounds }), &cfg)?;
    clock.write(args, "stress", &out.logs)?;
    let peak = peak_rss_kib().map_or("unknown".to_string(), |k| format!("{:.1} MiB", k as f64 / 1024.0));
    println!("stress: T={clients} rounds={rounds} wall {wall:.1} s peak memory {peak}");
    for log in &out.logs {
        println!("  round {}: {:.1} s", log.round, log.duration.as_secs_f64());
    }
    println!(
        "  trainable per client {} (prompt {} + head {}), total {}",
        report.trainable_per_client, report.prompt_scalars_per_client, report.head_scalars_per_client, report.counted_total
    );
    Ok(manifest)
}

/// The parts of `run.json` the post-processing commands read.
#[derive(Debug, Clone, Deserialize)]
pub struct RunFile {
    pub variant: Variant,
    pub config: FedConfig,
    pub rounds: Vec<RoundLog>,
    pub cross_eval: Vec<Vec<f64>>,
}

/// Parsed `run.json` plus the hash of its bytes.
pub fn read_run(run_dir: &Path) -> Result<(RunFile, String)> {
    let path = run_dir.join(RUN_JSON);
    let bytes = std::fs::read(&path).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let run = serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Config(format!("{} is not a run record: {e}", path.display())))?;
    Ok((run, sha256_hex(&bytes)))
}

fn matrix_csv(m: &[Vec<f64>], value: &str) -> String {
    let mut out = format!("row,col,{value}\n");
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out.push_str(&format!("{i},{j},{v}\n"));
        }
    }
    out
}

pub fn cmd_cross_eval(args: &GlobalArgs, run_dir: &Path) -> Result<RunManifest> {
    let (run, run_hash) = read_run(run_dir)?;
    let ck_path = run_dir.join(CHECKPOINT);
    let file = std::fs::File::open(&ck_path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", ck_path.display())))?;
    let ck = Checkpoint::read(std::io::BufReader::new(file))
        .map_err(|e| HarnessError::Config(format!("{}: {e}", ck_path.display())))?;
    let cfg = run.config;
    cfg.validate()?;
    let backbone = evifed_core::model::Backbone::new(&cfg.backbone)?;
    let mut clients = generate_data(&cfg)?
        .into_iter()
        .enumerate()
        .map(|(t, d)| ClientState::new(t, d, &cfg))
        .collect::<evifed_core::Result<Vec<_>>>()?;
    evifed_federation::export::restore(&cfg, &ck, &mut clients)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", ck_path.display())))?;
    let matrix = cross_evaluate(&backbone, &clients)?;

    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write("cross_eval.csv", matrix_csv(&matrix, "accuracy").as_bytes())?;
    let manifest = dir.finish("cross-eval", json!({ "run_json_sha256": run_hash }), &cfg)?;
    let t = matrix.len() as f64;
    let diag: f64 = (0..matrix.len()).map(|i| matrix[i][i]).sum::<f64>() / t;
    let off: f64 = matrix
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, v)| *v))
        .sum::<f64>()
        / (t * (t - 1.0)).max(1.0);
    for row in &matrix {
        println!("{}", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
    }
    println!("mean diagonal {diag:.4}, mean off-diagonal {off:.4}");
    Ok(manifest)
}

pub fn cmd_export_plots(args: &GlobalArgs, run_dir: &Path) -> Result<RunManifest> {
    let (run, run_hash) = read_run(run_dir)?;
    if run.rounds.is_empty() || run.cross_eval.is_empty() {
        return Err(HarnessError::Config(format!(
            "{} lacks round logs or the cross-evaluation matrix",
            run_dir.join(RUN_JSON).display()
        )));
    }
    let mut weights = String::from("round,row,col,weight\n");
    for log in &run.rounds {
        for (i, row) in log.weights.iter().flatten().enumerate() {
            for (j, w) in row.iter().enumerate() {
                weights.push_str(&format!("{},{i},{j},{w}\n", log.round));
            }
        }
    }
    let mut series = String::from("round,mean_accuracy,mean_uncertainty\n");
    for log in &run.rounds {
        let n = log.clients.len() as f64;
        let acc = log.clients.iter().map(|c| c.test.accuracy).sum::<f64>() / n;
        let unc = log.clients.iter().map(|c| c.test.mean_uncertainty).sum::<f64>() / n;
        series.push_str(&format!("{},{acc},{unc}\n", log.round));
    }
    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write("plots/weights.csv", weights.as_bytes())?;
    dir.write("plots/cross_eval.csv", matrix_csv(&run.cross_eval, "accuracy").as_bytes())?;
    dir.write("plots/accuracy_series.csv", series.as_bytes())?;
    let manifest = dir.finish("export-plots", json!({ "run_json_sha256": run_hash, "variant": run.variant.name() }), &run.config)?;
    println!("plot data for {} rounds -> {}", run.rounds.len(), args.out_dir.join("plots").display());
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_variance_by_hand() {
        let (m, v) = mean_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_variance(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn seed_offset_moves_all_three() {
        let c = with_seed_offset(&FedConfig::new(3), 5);
        assert_eq!((c.seed_data, c.seed_init, c.seed_shuffle), (5, 5, 5));
    }

    #[test]
    fn matrix_csv_is_long_format() {
        assert_eq!(matrix_csv(&[vec![1.0, 0.5], vec![0.25, 1.0]], "accuracy"), "row,col,accuracy\n0,0,1\n0,1,0.5\n1,0,0.25\n1,1,1\n");
    }
}
