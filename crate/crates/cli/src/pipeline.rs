use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use log::info;
use serde::{Deserialize, Serialize};
use specdec::distill::{train_drafter, write_curve_csv, LossWeights};
use specdec::drafters::{DraftModel, Variant};
use specdec::numerics::Parameters;
use specdec::speculation::{run_episode, CycleMetrics, MetricsLine, ModelDrafter};
use specdec::target_model::corpus::{split_rng, Split, SyntheticLanguage};
use specdec::target_model::{load_target, save_target, vanilla_decode, ModelWeights, Sampler};
use specdec::transport::{simulate_session, SessionConfig};

use crate::config::{DrafterSpec, RunConfig};

const PROMPT_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub struct Data {
    pub train: Vec<Vec<u32>>,
    pub heldout: Vec<Vec<u32>>,
}

pub fn data(cfg: &RunConfig) -> Data {
    let d = &cfg.data;
    let lang = SyntheticLanguage::new(cfg.model.vocab_size, &d.language);
    Data {
        train: lang.sequences(&mut split_rng(cfg.seed, Split::Train), d.train_sequences, d.sequence_len),
        heldout: lang.sequences(&mut split_rng(cfg.seed, Split::HeldOut), d.heldout_sequences, d.sequence_len),
    }
}

/// Held-out evaluation prompts, drawn from their own held-out stream.
pub fn prompts(cfg: &RunConfig, count: usize) -> Vec<Vec<u32>> {
    let lang = SyntheticLanguage::new(cfg.model.vocab_size, &cfg.data.language);
    let mut rng = split_rng(cfg.seed ^ PROMPT_STREAM_SALT, Split::HeldOut);
    lang.sequences(&mut rng, count, cfg.decode.prompt_len)
}

pub fn select_drafters(
    cfg: &RunConfig,
    variant: Option<Variant>,
    n: Option<usize>,
    no_lsa: bool,
) -> anyhow::Result<Vec<DrafterSpec>> {
    let Some(variant) = variant else {
        if n.is_some() || no_lsa {
            bail!("--n and --no-lsa need --variant");
        }
        return Ok(cfg.drafters.clone());
    };
    let spec = DrafterSpec {
        variant,
        n: n.unwrap_or(0),
        use_lsa: !no_lsa,
    };
    if spec.n >= cfg.model.layers || (variant != Variant::Moa && spec.n != 0) {
        bail!("n={} is not valid for variant {variant}", spec.n);
    }
    if variant != Variant::Moa && no_lsa {
        bail!("--no-lsa applies to the moa variant only");
    }
    Ok(vec![spec])
}

pub fn parse_prompt(s: &str) -> anyhow::Result<Vec<u32>> {
    let toks = s
        .split(',')
        .map(|t| t.trim().parse::<u32>().with_context(|| format!("bad token {t:?}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if toks.is_empty() {
        bail!("empty prompt");
    }
    Ok(toks)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn load_target_for(cfg: &RunConfig) -> anyhow::Result<Arc<ModelWeights>> {
    let path = cfg.target_path();
    let mut w = load_target(&path).with_context(|| format!("loading target {}", path.display()))?;
    if w.config != cfg.model {
        bail!("target checkpoint {} was trained with a different model config", path.display());
    }
    w.set_trainable(false);
    Ok(Arc::new(w))
}

fn load_drafter(cfg: &RunConfig, spec: &DrafterSpec, target: &Arc<ModelWeights>) -> anyhow::Result<DraftModel> {
    let path = cfg.drafter_path(spec);
    let d = DraftModel::load(&path, Arc::clone(target)).with_context(|| format!("loading drafter {}", path.display()))?;
    if d.variant() != spec.variant || d.config.n != spec.n || d.config.use_lsa != spec.use_lsa {
        bail!("{} holds a different drafter than {}", path.display(), spec.name());
    }
    Ok(d)
}

pub fn train_target(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = data(cfg);
    let mut w = ModelWeights::init(cfg.model.clone(), cfg.seed)?;
    let tc = specdec::target_model::TrainTargetConfig {
        seed: cfg.target_training.seed ^ cfg.seed,
        ..cfg.target_training.clone()
    };
    let report = specdec::target_model::train_target(&mut w, &data.train, &data.heldout, &tc)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let hash = save_target(&w, &cfg.target_path())?;
    write_curve_csv(&cfg.out_dir.join("target_loss.csv"), &report.curve)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    info!(
        "target held-out loss {:.4} -> {:.4}",
        report.initial_eval, report.final_eval
    );
    println!("{} sha256:{hash}", cfg.target_path().display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DistillSummary {
    pub name: String,
    pub variant: Variant,
    pub n: usize,
    pub use_lsa: bool,
    pub weights: LossWeights,
    pub initial_eval: f64,
    pub final_eval: f64,
    pub checkpoint_sha256: String,
}

/// Loss weights actually used for `variant`; the independent drafter never
/// regresses activations.
pub fn effective_weights(cfg: &RunConfig, variant: Variant) -> LossWeights {
    let mut w = cfg.distill.weights_for(variant);
    if variant == Variant::Independent {
        w.smooth_l1 = 0.0;
    }
    w
}

pub fn distill(cfg: &RunConfig, specs: &[DrafterSpec]) -> anyhow::Result<()> {
    let target = load_target_for(cfg)?;
    let data = data(cfg);
    fs::create_dir_all(cfg.out_dir.join("drafters"))?;
    for spec in specs {
        let mut d = DraftModel::init(spec.drafter_config(&cfg.drafter_base), Arc::clone(&target))?;
        let weights = effective_weights(cfg, spec.variant);
        let dc = specdec::distill::DistillConfig {
            weights: Some(weights),
            seed: cfg.distill.seed ^ cfg.seed,
            ..cfg.distill.clone()
        };
        let report = train_drafter(&mut d, &data.train, &data.heldout, &dc)?;
        let path = cfg.drafter_path(spec);
        let hash = d.save(&path)?;
        let name = spec.name();
        write_curve_csv(&cfg.out_dir.join("drafters").join(format!("{name}_loss.csv")), &report.curve)?;
        write_json(
            &cfg.out_dir.join("drafters").join(format!("{name}.json")),
            &DistillSummary {
                name: name.clone(),
                variant: spec.variant,
                n: spec.n,
                use_lsa: spec.use_lsa,
                weights,
                initial_eval: report.initial_eval,
                final_eval: report.final_eval,
                checkpoint_sha256: hash.clone(),
            },
        )?;
        info!("{name}: held-out loss {:.4} -> {:.4}", report.initial_eval, report.final_eval);
        println!("{} sha256:{hash}", path.display());
    }
    Ok(())
}

fn sampler(cfg: &RunConfig, episode: usize) -> Sampler {
    if cfg.decode.temperature > 0.0 {
        Sampler::seeded(cfg.seed ^ (episode as u64).wrapping_mul(0x2545_f491_4f6c_dd1d), cfg.decode.temperature)
    } else {
        Sampler::Greedy
    }
}

pub fn generate(cfg: &RunConfig, spec: &DrafterSpec, prompt: Option<Vec<u32>>) -> anyhow::Result<()> {
    let target = load_target_for(cfg)?;
    let d = load_drafter(cfg, spec, &target)?;
    let prompt = match prompt {
        Some(p) => p,
        None => prompts(cfg, 1).remove(0),
    };
    let mut md = ModelDrafter::new(&d);
    let ep = run_episode(&target, &mut md, &prompt, cfg.decode.mode(), &mut sampler(cfg, 0), cfg.decode.max_new)?;
    let mut out = serde_json::json!({
        "drafter": spec.name(),
        "prompt": prompt,
        "tokens": ep.tokens,
        "cycles": ep.metrics.cycles.len(),
        "tau_accept": ep.metrics.tau_accept(),
        "tau_per_call": ep.metrics.tau_per_call(),
        "drafter_calls": ep.metrics.drafter_calls,
    });
    if cfg.decode.temperature == 0.0 {
        let vanilla = vanilla_decode(&target, &prompt, &mut Sampler::Greedy, cfg.decode.max_new)?;
        out["matches_plain_decoding"] = (vanilla == ep.tokens).into();
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

/// One row of the bench table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub variant: Variant,
    pub n: usize,
    pub use_lsa: bool,
    pub cycles: usize,
    pub target_calls: usize,
    pub tokens: usize,
    pub tau_accept: f64,
    pub tau_per_call: f64,
}

/// Aggregates recomputed from the per-cycle lines of a metrics JSONL file.
pub fn summarize_jsonl(path: &Path) -> anyhow::Result<(usize, usize, f64, f64)> {
    let (mut cycles, mut accepted) = (0usize, 0usize);
    for line in BufReader::new(File::open(path)?).lines() {
        let line: MetricsLine = serde_json::from_str(&line?)?;
        if line.cycle.is_some() {
            cycles += 1;
            accepted += line.accepted;
        }
    }
    let tokens = accepted + cycles;
    let per = |x: usize| if cycles == 0 { 0.0 } else { x as f64 / cycles as f64 };
    Ok((cycles, tokens, per(accepted), per(tokens)))
}

fn run_episodes(cfg: &RunConfig, target: &ModelWeights, d: &DraftModel, prompts: &[Vec<u32>]) -> anyhow::Result<CycleMetrics> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(prompts.len().max(1));
    let chunk = prompts.len().div_ceil(threads).max(1);
    let parts: Vec<anyhow::Result<Vec<CycleMetrics>>> = std::thread::scope(|s| {
        let handles: Vec<_> = prompts
            .chunks(chunk)
            .enumerate()
            .map(|(c, ps)| {
                s.spawn(move || {
                    ps.iter()
                        .enumerate()
                        .map(|(i, p)| {
                            let mut md = ModelDrafter::new(d);
                            let mut smp = sampler(cfg, c * chunk + i);
                            let ep = run_episode(target, &mut md, p, cfg.decode.mode(), &mut smp, cfg.decode.max_new)?;
                            Ok(ep.metrics)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("episode worker panicked")).collect()
    });
    let mut total = CycleMetrics::default();
    for part in parts {
        for m in part? {
            total.merge(&m);
        }
    }
    Ok(total)
}

pub fn bench(cfg: &RunConfig) -> anyhow::Result<()> {
    let target = load_target_for(cfg)?;
    let drafters = cfg
        .drafters
        .iter()
        .map(|s| load_drafter(cfg, s, &target))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let prompts = prompts(cfg, cfg.decode.prompts);
    let dir = cfg.out_dir.join("bench");
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for (spec, d) in cfg.drafters.iter().zip(&drafters) {
        let metrics = run_episodes(cfg, &target, d, &prompts)?;
        let path = dir.join(format!("{}.jsonl", spec.name()));
        let mut f = BufWriter::new(File::create(&path)?);
        metrics.write_jsonl(&mut f)?;
        f.flush()?;
        drop(f);
        let (cycles, tokens, tau_accept, tau_per_call) = summarize_jsonl(&path)?;
        rows.push(BenchRow {
            name: spec.name(),
            variant: spec.variant,
            n: spec.n,
            use_lsa: spec.use_lsa,
            cycles,
            target_calls: cycles,
            tokens,
            tau_accept,
            tau_per_call,
        });
    }
    write_json(&dir.join("summary.json"), &rows)?;
    println!("{:<16} {:>7} {:>10} {:>12}", "drafter", "cycles", "tau_accept", "tau_per_call");
    for r in &rows {
        println!("{:<16} {:>7} {:>10.3} {:>12.3}", r.name, r.cycles, r.tau_accept, r.tau_per_call);
    }
    Ok(())
}

/// One client-server session in the simulate transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLine {
    pub prompt_index: usize,
    pub tokens: Vec<u32>,
    /// Tokens committed before the link was cut, if it was.
    pub cut_at: Option<usize>,
    pub online_tokens: Vec<u32>,
    pub offline_tokens: Vec<u32>,
    pub cycles: usize,
    pub tau_accept: f64,
    pub target_calls: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub bootstrap_bytes: usize,
    pub drops: usize,
    pub retransmitted_bytes: usize,
    pub virtual_time_s: f64,
    pub calls_after_cut: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRow {
    pub name: String,
    pub profile: String,
    pub sessions: usize,
    pub tokens: usize,
    pub tau_accept: f64,
    pub target_calls: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub overhead_s_per_token: f64,
    pub continuation_tokens: usize,
}

pub fn simulate(cfg: &RunConfig, specs: &[DrafterSpec]) -> anyhow::Result<()> {
    let target = load_target_for(cfg)?;
    let profile = cfg.network.resolve(&cfg.network.profile)?;
    let prompts = prompts(cfg, cfg.network.prompts);
    let dir = cfg.out_dir.join("simulate");
    fs::create_dir_all(&dir)?;
    let session = SessionConfig {
        mode: cfg.decode.mode(),
        max_new: cfg.decode.max_new,
        disconnect_after: cfg.network.disconnect_after,
    };
    let mut rows = Vec::new();
    for spec in specs {
        let d = load_drafter(cfg, spec, &target)?;
        let path = dir.join(format!("{}_{}.jsonl", spec.name(), profile.name));
        let mut f = BufWriter::new(File::create(&path)?);
        let mut row = SimulateRow {
            name: spec.name(),
            profile: profile.name.clone(),
            sessions: prompts.len(),
            tokens: 0,
            tau_accept: 0.0,
            target_calls: 0,
            bytes_up: 0,
            bytes_down: 0,
            overhead_s_per_token: 0.0,
            continuation_tokens: 0,
        };
        let (mut cycles, mut accepted, mut time) = (0, 0, 0.0);
        for (i, p) in prompts.iter().enumerate() {
            let out = simulate_session(&target, &d, &profile, cfg.seed.wrapping_add(i as u64), p, &session)?;
            let m = &out.metrics;
            let cut = m.cut_at.unwrap_or(out.tokens.len());
            let line = SessionLine {
                prompt_index: i,
                tokens: out.tokens.clone(),
                cut_at: m.cut_at,
                online_tokens: out.tokens[..cut].to_vec(),
                offline_tokens: out.tokens[cut..].to_vec(),
                cycles: m.cycles.cycles.len(),
                tau_accept: m.cycles.tau_accept(),
                target_calls: m.target_calls,
                bytes_up: m.bytes_up,
                bytes_down: m.bytes_down,
                bootstrap_bytes: m.bootstrap_bytes,
                drops: m.link.drops,
                retransmitted_bytes: m.link.retransmitted_bytes,
                virtual_time_s: m.virtual_time_s,
                calls_after_cut: m.calls_after_cut,
            };
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n")?;
            cycles += line.cycles;
            accepted += m.cycles.total_accepted();
            time += m.virtual_time_s;
            row.tokens += out.tokens.len();
            row.target_calls += m.target_calls;
            row.bytes_up += m.bytes_up;
            row.bytes_down += m.bytes_down;
            row.continuation_tokens += m.offline_tokens;
        }
        f.flush()?;
        if cycles > 0 {
            row.tau_accept = accepted as f64 / cycles as f64;
        }
        if row.tokens > 0 {
            row.overhead_s_per_token = time / row.tokens as f64;
        }
        rows.push(row);
    }
    write_json(&dir.join(format!("summary_{}.json", profile.name)), &rows)?;
    println!(
        "{:<16} {:>8} {:>10} {:>10} {:>12} {:>10}",
        "drafter", "tau", "bytes_up", "bytes_down", "s/token", "offline"
    );
    for r in &rows {
        println!(
            "{:<16} {:>8.3} {:>10} {:>10} {:>12.5} {:>10}",
            r.name, r.tau_accept, r.bytes_up, r.bytes_down, r.overhead_s_per_token, r.continuation_tokens
        );
    }
    Ok(())
}
