//! End-to-end acceptance checks. Runs as a plain binary: one PASS/FAIL line
//! per criterion, non-zero exit if any fails.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdec::distill::{example_loss, train_drafter, DistillConfig, DistillExample, LossWeights};
use specdec::drafters::{DraftModel, DrafterConfig, Variant, ROOT_SLOT};
use specdec::numerics::{gradient_check, AttentionMask, GradCheckConfig, Graph, Parameters};
use specdec::speculation::{
    acceptance_probability, residual_distribution, run_episode, verify_sampling, CycleMetrics, DraftMode,
    DraftTree, ModelDrafter, SampledChain, TargetOracle, TreeShape,
};
use specdec::target_model::corpus::{split_rng, CorpusConfig, Split, SyntheticLanguage};
use specdec::target_model::{
    decode_layers, forward_full, probabilities, train_target, vanilla_decode, ModelConfig, ModelWeights, Sampler,
    TrainTargetConfig,
};
use specdec::transport::{
    encode_draft, run_session, simulate_session, socket_session, standalone_continuation, Client, Delivery,
    NetworkProfile, NetworkSim, Server, SessionConfig, SimLink,
};

type Check = anyhow::Result<String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> anyhow::Result<()> {
    if ok {
        Ok(())
    } else {
        Err(anyhow::anyhow!(msg()))
    }
}

fn within_budget(start: Instant, budget: Duration) -> anyhow::Result<String> {
    let took = start.elapsed();
    ensure(took <= budget, || format!("took {took:.1?}, budget {budget:?}"))?;
    Ok(format!("{:.1}s", took.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Shared trained models

const SEEDS: [u64; 3] = [0, 1, 2];
const DISTILL_STEPS: usize = 200;
const PROMPT_LEN: usize = 12;
const MAX_NEW: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Moa0,
    Moa1,
    Moa3,
    Eagle,
    Moa0NoLsa,
    Independent,
}

impl Kind {
    const ABLATION: [Kind; 5] = [Kind::Moa0, Kind::Moa1, Kind::Moa3, Kind::Eagle, Kind::Moa0NoLsa];
    const ALL: [Kind; 6] = [
        Kind::Moa0,
        Kind::Moa1,
        Kind::Moa3,
        Kind::Eagle,
        Kind::Moa0NoLsa,
        Kind::Independent,
    ];

    fn config(self, seed: u64) -> DrafterConfig {
        let (variant, n, use_lsa) = match self {
            Kind::Moa0 => (Variant::Moa, 0, true),
            Kind::Moa1 => (Variant::Moa, 1, true),
            Kind::Moa3 => (Variant::Moa, 3, true),
            Kind::Eagle => (Variant::Eagle, 0, true),
            Kind::Moa0NoLsa => (Variant::Moa, 0, false),
            Kind::Independent => (Variant::Independent, 0, true),
        };
        DrafterConfig {
            use_lsa,
            init_seed: seed,
            ..DrafterConfig::for_variant(variant, n)
        }
    }
}

struct Lab {
    target: Arc<ModelWeights>,
    prompts: Vec<Vec<u32>>,
    drafters: HashMap<(Kind, u64), DraftModel>,
    training_time: Duration,
}

impl Lab {
    fn drafter(&self, kind: Kind) -> &DraftModel {
        &self.drafters[&(kind, 0)]
    }
}

fn build_lab() -> anyhow::Result<Lab> {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let lang = SyntheticLanguage::new(cfg.vocab_size, &CorpusConfig::default());
    let train = lang.sequences(&mut split_rng(0, Split::Train), 2000, 64);
    let heldout = lang.sequences(&mut split_rng(0, Split::HeldOut), 64, 64);
    let prompts = lang.sequences(&mut split_rng(1, Split::HeldOut), 100, PROMPT_LEN);
    let mut target = ModelWeights::init(cfg, 0)?;
    let tc = TrainTargetConfig {
        steps: 300,
        ..TrainTargetConfig::default()
    };
    let report = train_target(&mut target, &train, &heldout, &tc)?;
    log(&format!(
        "target trained: held-out loss {:.3} -> {:.3}",
        report.initial_eval, report.final_eval
    ));
    target.set_trainable(false);
    let target = Arc::new(target);
    let mut drafters = HashMap::new();
    let jobs = SEEDS
        .iter()
        .flat_map(|&s| Kind::ABLATION.iter().map(move |&k| (k, s)))
        .chain(std::iter::once((Kind::Independent, 0)));
    for (kind, seed) in jobs {
        let mut d = DraftModel::init(kind.config(seed), Arc::clone(&target))?;
        let dc = DistillConfig {
            steps: DISTILL_STEPS,
            seed,
            ..DistillConfig::default()
        };
        let r = train_drafter(&mut d, &train, &heldout, &dc)?;
        log(&format!(
            "drafter {kind:?} seed {seed}: held-out loss {:.3} -> {:.3}",
            r.initial_eval, r.final_eval
        ));
        d.set_trainable(false);
        drafters.insert((kind, seed), d);
    }
    Ok(Lab {
        target,
        prompts,
        drafters,
        training_time: start.elapsed(),
    })
}

fn log(msg: &str) {
    let _ = writeln!(std::io::stderr(), "  .. {msg}");
}

fn tree_mode() -> DraftMode {
    DraftMode::Tree(TreeShape::default())
}

// ---------------------------------------------------------------------------
// 1. Losslessness

fn losslessness(lab: &Lab) -> Check {
    let start = Instant::now();
    let t = &lab.target;
    let modes = [DraftMode::Chain { k: 5 }, tree_mode()];
    let mut episodes = 0;
    let mut accepted = 0;
    for (i, p) in lab.prompts.iter().enumerate() {
        let vanilla = vanilla_decode(t, p, &mut Sampler::Greedy, MAX_NEW)?;
        for kind in Kind::ALL {
            for mode in modes {
                let mut md = ModelDrafter::new(lab.drafter(kind));
                let ep = run_episode(t, &mut md, p, mode, &mut Sampler::Greedy, MAX_NEW)?;
                ensure(ep.tokens == vanilla, || format!("prompt {i} {kind:?} {mode:?} diverged"))?;
                accepted += ep.metrics.total_accepted();
                episodes += 1;
            }
        }
    }
    ensure(accepted > 0, || "no draft was ever accepted".into())?;
    let took = within_budget(start, Duration::from_secs(300))?;
    Ok(format!(
        "{episodes} episodes over {} prompts identical to plain greedy decoding ({accepted} accepted drafts, {took})",
        lab.prompts.len()
    ))
}

// ---------------------------------------------------------------------------
// 2. Distribution preservation

struct SamplingLab {
    target: ModelWeights,
    prompt: Vec<u32>,
    pending: u32,
    q: HashMap<Vec<u32>, Vec<f64>>,
}

const V: usize = 5;
const K: usize = 3;

impl SamplingLab {
    fn new() -> anyhow::Result<Self> {
        let cfg = ModelConfig {
            vocab_size: V,
            layers: 2,
            embed: 8,
            kv_embed: 4,
            heads: 2,
            mlp_hidden: 12,
            max_seq: 16,
            ..ModelConfig::default()
        };
        let target = ModelWeights::init(cfg, 21)?;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut q = HashMap::new();
        let mut prefixes = vec![Vec::new()];
        for _ in 0..K {
            let mut next = Vec::new();
            for h in &prefixes {
                let raw: Vec<f64> = (0..V).map(|_| rng.gen_range(0.05..1.0f64).powi(2)).collect();
                let s: f64 = raw.iter().sum();
                q.insert(h.clone(), raw.iter().map(|x| x / s).collect());
                for x in 0..V as u32 {
                    let mut e = h.clone();
                    e.push(x);
                    next.push(e);
                }
            }
            prefixes = next;
        }
        Ok(Self {
            target,
            prompt: vec![1, 3],
            pending: 2,
            q,
        })
    }

    /// Target distribution after the prompt, the pending token and `h`.
    fn p(&self, h: &[u32]) -> anyhow::Result<Vec<f64>> {
        let mut toks = self.prompt.clone();
        toks.push(self.pending);
        toks.extend_from_slice(h);
        let (_, logits) = forward_full(&self.target, &toks)?;
        Ok(probabilities(logits.row(toks.len() - 1), 1.0))
    }

    /// Exact probability of every emitted sequence of one verification cycle.
    fn enumerate(&self) -> anyhow::Result<HashMap<Vec<u32>, f64>> {
        let mut out = HashMap::new();
        let mut frontier = vec![(Vec::<u32>::new(), 1.0f64)];
        for depth in 0..K {
            let mut next = Vec::new();
            for (h, mass) in frontier {
                let p = self.p(&h)?;
                let q = &self.q[&h];
                let resid = residual_distribution(&p, q);
                let mut reject = 0.0;
                for x in 0..V as u32 {
                    let a = acceptance_probability(&p, q, x)?;
                    reject += q[x as usize] * (1.0 - a);
                    let mut e = h.clone();
                    e.push(x);
                    next.push((e, mass * q[x as usize] * a));
                }
                for (y, r) in resid.iter().enumerate() {
                    let mut e = h.clone();
                    e.push(y as u32);
                    *out.entry(e).or_insert(0.0) += mass * reject * r;
                }
            }
            frontier = next;
            if depth + 1 == K {
                for (h, mass) in &frontier {
                    let p = self.p(h)?;
                    for (y, py) in p.iter().enumerate() {
                        let mut e = h.clone();
                        e.push(y as u32);
                        *out.entry(e).or_insert(0.0) += mass * py;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Extends every emitted sequence to `K + 1` tokens by sampling the target.
    fn completed(&self, emitted: &HashMap<Vec<u32>, f64>) -> anyhow::Result<HashMap<Vec<u32>, f64>> {
        let mut done: HashMap<Vec<u32>, f64> = HashMap::new();
        let mut work: Vec<(Vec<u32>, f64)> = emitted.iter().map(|(k, v)| (k.clone(), *v)).collect();
        while let Some((h, m)) = work.pop() {
            if h.len() == K + 1 {
                *done.entry(h).or_insert(0.0) += m;
                continue;
            }
            for (y, py) in self.p(&h)?.iter().enumerate() {
                let mut e = h.clone();
                e.push(y as u32);
                work.push((e, m * py));
            }
        }
        Ok(done)
    }
}

fn distribution_preservation() -> Check {
    let start = Instant::now();
    let lab = SamplingLab::new()?;
    let emitted = lab.enumerate()?;
    let total: f64 = emitted.values().sum();
    ensure((total - 1.0).abs() <= 1e-12, || format!("outcome mass {total}"))?;
    let completed = lab.completed(&emitted)?;
    let mut worst = 0.0f64;
    let mut stack = vec![(Vec::<u32>::new(), 1.0f64)];
    while let Some((h, m)) = stack.pop() {
        if h.len() == K + 1 {
            worst = worst.max((completed.get(&h).copied().unwrap_or(0.0) - m).abs());
            continue;
        }
        for (y, py) in lab.p(&h)?.iter().enumerate() {
            let mut e = h.clone();
            e.push(y as u32);
            stack.push((e, m * py));
        }
    }
    ensure(worst <= 1e-9, || format!("joint deviation {worst:e}"))?;
    let p0 = lab.p(&[])?;
    let mut first = [0.0f64; V];
    let mut by_len = [0.0f64; K + 1];
    for (s, m) in &emitted {
        first[s[0] as usize] += m;
        by_len[s.len() - 1] += m;
    }
    let marginal = first.iter().zip(&p0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(marginal <= 1e-9, || format!("first-token marginal deviation {marginal:e}"))?;

    let trials = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut toks = lab.prompt.clone();
    toks.push(lab.pending);
    let (base, _) = forward_full(&lab.target, &lab.prompt)?;
    let mut first_counts = [0usize; V];
    let mut len_counts = [0usize; K + 1];
    for _ in 0..trials {
        let mut chain = SampledChain {
            tokens: Vec::new(),
            q: Vec::new(),
        };
        for _ in 0..K {
            let q = lab.q[&chain.tokens].clone();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let x = q
                .iter()
                .position(|&w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(V - 1) as u32;
            chain.tokens.push(x);
            chain.q.push(q);
        }
        let mut snap = base.clone();
        let o = verify_sampling(&lab.target, &mut snap, lab.pending, &chain, 1.0, &mut rng)?;
        let first = if o.accepted_count > 0 { chain.tokens[0] } else { o.bonus_token };
        first_counts[first as usize] += 1;
        len_counts[o.accepted_count] += 1;
    }
    let n = trials as f64;
    let z = |count: usize, p: f64| {
        let sigma = (p * (1.0 - p) / n).sqrt();
        ((count as f64 / n) - p).abs() / sigma.max(1e-300)
    };
    let z_first = first_counts.iter().zip(&p0).map(|(&c, &p)| z(c, p)).fold(0.0, f64::max);
    let z_len = len_counts.iter().zip(&by_len).map(|(&c, &p)| z(c, p)).fold(0.0, f64::max);
    ensure(z_first <= 3.0 && z_len <= 3.0, || {
        format!("Monte-Carlo deviation {z_first:.2} / {z_len:.2} sigma")
    })?;
    let took = within_budget(start, Duration::from_secs(120))?;
    Ok(format!(
        "exact joint deviation {worst:.1e}, marginal {marginal:.1e}; 100k trials within {:.2} sigma ({took})",
        z_first.max(z_len)
    ))
}

// ---------------------------------------------------------------------------
// 3. Top-layer factorization

fn tli_factorization(lab: &Lab) -> Check {
    let t = &lab.target;
    let l = t.config.layers;
    let empty = t.empty_snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let len = rng.gen_range(2..40);
        let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(1..t.config.vocab_size as u32)).collect();
        let (snap, _) = forward_full(t, &toks)?;
        let positions: Vec<usize> = (0..len).collect();
        let mask = AttentionMask::causal(len)?;
        let truth = snap.tap_rows(l + 1, 0, len);
        for n in [0, 1, 3] {
            let input = snap.tap_rows(l + 1 - n, 0, len);
            let (out, _) = decode_layers(t, &empty.cache, &input, n, &[], &positions, &mask)?;
            worst = worst.max(out.max_abs_diff(&truth));
        }
    }
    ensure(worst <= 1e-5, || format!("max deviation {worst:e}"))?;
    Ok(format!("50 prompts, N in {{0,1,3}}: max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. K-step boundedness

fn kstep(model: &DraftModel, seq: &[u32], p: usize, k: usize) -> anyhow::Result<f64> {
    let (snap, _) = forward_full(&model.target, &seq[..p + k])?;
    let mut g: Graph<f32> = Graph::no_grad();
    let tf = model.teacher_forced(&mut g, &snap, p, &[], None)?;
    let batched = g.value(tf.logits).clone();
    let mut st = model.new_state();
    let feed = model.build_feed(&snap, 0, p)?;
    st.commit(model, &seq[..p], &feed, seq[p])?;
    let mut logits = st.root(model)?;
    let mut slot = ROOT_SLOT;
    let mut worst = 0.0f64;
    for i in 0..k {
        let d = logits
            .iter()
            .zip(batched.row(p + i))
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        worst = worst.max(d);
        if i + 1 < k {
            let (s, l) = st.extend(model, slot, seq[p + i + 1])?;
            slot = s;
            logits = l;
        }
    }
    Ok(worst)
}

fn k_step_boundedness(lab: &Lab) -> Check {
    let mut worst = 0.0f64;
    let mut checks = 0;
    for kind in [Kind::Moa0, Kind::Moa1, Kind::Moa3, Kind::Moa0NoLsa] {
        let model = lab.drafter(kind);
        for (i, k) in (1..=15).enumerate() {
            let seq = &lab.prompts[i];
            let mut full = seq.clone();
            full.extend(vanilla_decode(&lab.target, seq, &mut Sampler::Greedy, 16)?);
            worst = worst.max(kstep(model, &full, PROMPT_LEN - 2, k)?);
            checks += 1;
        }
    }
    ensure(worst <= 1e-5, || format!("max deviation {worst:e}"))?;
    Ok(format!("{checks} drafter/K pairs, K in 1..=15: max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Gradient correctness

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 11,
        layers: 2,
        embed: 8,
        kv_embed: 4,
        heads: 2,
        mlp_hidden: 12,
        max_seq: 16,
        ..ModelConfig::default()
    };
    let target = Arc::new(ModelWeights::init(cfg, 3)?);
    let micro = |variant, n| DrafterConfig {
        variant,
        n,
        lsa_kv: 4,
        lsa_heads: 2,
        lsa_mlp: 6,
        sa_kv: 4,
        sa_heads: 2,
        sa_mlp: 6,
        ca_kv: 4,
        ca_heads: 2,
        ca_mlp: 6,
        eagle_kv: 4,
        eagle_heads: 2,
        eagle_mlp: 6,
        independent_layers: 1,
        independent_mlp: 6,
        init_seed: 9,
        ..DrafterConfig::default()
    };
    let variants = [
        micro(Variant::Moa, 0),
        micro(Variant::Moa, 1),
        DrafterConfig {
            use_lsa: false,
            ..micro(Variant::Moa, 0)
        },
        DrafterConfig {
            use_layer_embedding: false,
            ..micro(Variant::Moa, 1)
        },
        micro(Variant::Eagle, 0),
        micro(Variant::Independent, 0),
    ];
    let tokens = [1u32, 5, 9, 2, 7, 3, 10, 4, 6];
    let weights = LossWeights {
        kl: 1.0,
        smooth_l1: 1.0,
        smooth_l1_beta: 1.0,
    };
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for cfg in variants {
        let label = format!("{} n={} lsa={}", cfg.variant, cfg.n, cfg.use_lsa);
        let mut model = DraftModel::init(cfg, Arc::clone(&target))?;
        let ex = DistillExample::new(&model, &tokens, 3, vec![6])?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = gradient_check(&mut model, GradCheckConfig::default(), &mut rng, |m, grads| {
            example_loss::<f64>(m, &ex, &weights, None, grads)
        })?;
        ensure(!report.is_empty(), || format!("{label}: nothing checked"))?;
        for e in report {
            ensure(e.rel_error <= 1e-4, || format!("{label} {}: {:e}", e.name, e.rel_error))?;
            worst = worst.max(e.rel_error);
            tensors += 1;
        }
    }
    let took = within_budget(start, Duration::from_secs(600))?;
    Ok(format!("{tensors} tensors over 6 variants, worst relative error {worst:.1e} ({took})"))
}

// ---------------------------------------------------------------------------
// 6. Byte-formula conformance

fn byte_formulas() -> Check {
    let cfg = ModelConfig {
        vocab_size: 32,
        layers: 4,
        embed: 16,
        kv_embed: 4,
        heads: 4,
        mlp_hidden: 24,
        max_seq: 96,
        ..ModelConfig::default()
    };
    let target = Arc::new(ModelWeights::init(cfg, 41)?);
    let (e, ekv) = (target.config.embed, target.config.kv_embed);
    let small = |variant, n, use_lsa| DrafterConfig {
        variant,
        n,
        use_lsa,
        lsa_kv: 8,
        lsa_mlp: 16,
        sa_kv: 8,
        sa_mlp: 16,
        ca_kv: 8,
        ca_mlp: 16,
        eagle_kv: 8,
        eagle_mlp: 16,
        independent_layers: 1,
        independent_mlp: 16,
        ..DrafterConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut lines = Vec::new();
    for (variant, n, lsa) in [
        (Variant::Moa, 0, true),
        (Variant::Moa, 1, true),
        (Variant::Moa, 3, true),
        (Variant::Eagle, 0, true),
        (Variant::Independent, 0, true),
    ] {
        let d = DraftModel::init(small(variant, n, lsa), Arc::clone(&target))?;
        let mut cycles = 0;
        let mut session = 0u64;
        while cycles < 1000 {
            let breadth = rng.gen_range(1..=4);
            let depth = rng.gen_range(1..=5);
            let budget = rng.gen_range(breadth..=breadth * depth);
            let mode = DraftMode::Tree(TreeShape { breadth, depth, budget });
            let prompt: Vec<u32> = (0..rng.gen_range(2..10)).map(|_| rng.gen_range(1..32)).collect();
            let cfg = SessionConfig {
                mode,
                max_new: 40,
                disconnect_after: None,
            };
            let out = simulate_session(&target, &d, &NetworkProfile::ideal(), session, &prompt, &cfg)?;
            session += 1;
            for c in &out.metrics.accounting {
                let a = c.verified;
                let down = match variant {
                    Variant::Moa => 3 * a + 2 * a * ekv * (n + 1),
                    Variant::Eagle => 3 * a + a * e,
                    Variant::Independent => 3 * a,
                };
                ensure(c.up_units == 4 * c.drafted, || format!("up {} for M={}", c.up_units, c.drafted))?;
                ensure(c.down_units == down, || format!("{variant} n={n}: down {} expected {down}", c.down_units))?;
                cycles += 1;
            }
        }
        lines.push(format!("{variant} n={n}: {cycles}"));
    }
    for _ in 0..1000 {
        let m = rng.gen_range(0..=62);
        let mut pairs: Vec<(u32, Option<usize>)> = Vec::new();
        while pairs.len() < m {
            let parent = if pairs.is_empty() { None } else { Some(rng.gen_range(0..pairs.len())) };
            let tok = rng.gen_range(0..1u32 << 24);
            if !pairs.iter().any(|&(t, p)| t == tok && p == parent) {
                pairs.push((tok, parent));
            }
        }
        let bytes = encode_draft(&DraftTree::from_parents(&pairs)?)?;
        ensure(bytes.len() - 2 == 4 * m, || format!("draft of {m} nodes is {} bytes", bytes.len()))?;
    }
    Ok(format!("cycles checked per variant: {}; 1000 random drafts at 4M", lines.join(", ")))
}

// ---------------------------------------------------------------------------
// 7. Network profile fidelity

fn network_fidelity() -> Check {
    let mut parts = Vec::new();
    for (i, profile) in [NetworkProfile::four_g(), NetworkProfile::five_g()].into_iter().enumerate() {
        let name = profile.name.clone();
        let (mu, sd, drop) = (profile.delay_mean_ms, profile.delay_std_ms, profile.drop_prob);
        let mut sim = NetworkSim::new(profile, 70 + i as u64)?;
        let sends = 100_000;
        let mut delays = Vec::with_capacity(sends);
        for _ in 0..sends {
            if let Delivery::Delivered { delay, .. } = sim.send(0, 0.0) {
                delays.push(delay * 1e3);
            }
        }
        let n = delays.len() as f64;
        let mean = delays.iter().sum::<f64>() / n;
        let std = (delays.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let rate = sim.stats.drops as f64 / sends as f64;
        ensure((mean - mu).abs() <= 0.02 * mu, || format!("{name}: mean {mean:.3} ms"))?;
        ensure((std - sd).abs() <= 0.05 * sd, || format!("{name}: std {std:.3} ms"))?;
        ensure((0.5 * drop..=2.0 * drop).contains(&rate), || format!("{name}: drop rate {rate}"))?;
        parts.push(format!("{name} mean {mean:.2} std {std:.2} drops {:.3}%", rate * 100.0));
    }
    let four = NetworkProfile::four_g();
    let ser = four.serialization_s(1_000_000);
    ensure(ser == 0.4, || format!("1 MB serialization {ser}"))?;
    let mut sim = NetworkSim::new(four, 79)?;
    let at = loop {
        if let Delivery::Delivered { at, delay, serialization } = sim.send(1_000_000, 0.0) {
            ensure(serialization == 0.4 && at == delay + 0.4, || "serialization not added".into())?;
            break at;
        }
    };
    Ok(format!("{}; 1 MB at 20 Mbit/s adds 0.4 s (arrival {at:.4} s)", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 8 and 9. Ablation trends

const EVAL_PROMPTS: usize = 60;

fn tau(lab: &Lab, model: &DraftModel) -> anyhow::Result<CycleMetrics> {
    let mut m = CycleMetrics::default();
    for p in &lab.prompts[..EVAL_PROMPTS] {
        let mut md = ModelDrafter::new(model);
        let ep = run_episode(&lab.target, &mut md, p, tree_mode(), &mut Sampler::Greedy, MAX_NEW)?;
        m.merge(&ep.metrics);
    }
    Ok(m)
}

fn mean_taus(lab: &Lab) -> anyhow::Result<HashMap<Kind, (f64, usize)>> {
    let mut out = HashMap::new();
    for kind in Kind::ABLATION {
        let mut sum = 0.0;
        let mut min_cycles = usize::MAX;
        for seed in SEEDS {
            let m = tau(lab, &lab.drafters[&(kind, seed)])?;
            log(&format!(
                "{kind:?} seed {seed}: tau_accept {:.3} over {} cycles",
                m.tau_accept(),
                m.cycles.len()
            ));
            sum += m.tau_accept();
            min_cycles = min_cycles.min(m.cycles.len());
        }
        out.insert(kind, (sum / SEEDS.len() as f64, min_cycles));
    }
    Ok(out)
}

fn ablation_trend(taus: &HashMap<Kind, (f64, usize)>, start: Instant) -> Check {
    let t = |k| taus[&k].0;
    let min_cycles = taus.values().map(|v| v.1).min().unwrap_or(0);
    let summary = format!(
        "tau MoA N=0 {:.3}, N=1 {:.3}, N=3 {:.3}, EAGLE {:.3}; min {min_cycles} cycles",
        t(Kind::Moa0),
        t(Kind::Moa1),
        t(Kind::Moa3),
        t(Kind::Eagle)
    );
    ensure(min_cycles >= 500, || format!("{summary}: too few cycles"))?;
    ensure(t(Kind::Moa0) > t(Kind::Eagle), || format!("{summary}: MoA N=0 does not beat EAGLE"))?;
    ensure(t(Kind::Moa1) >= t(Kind::Moa0) - 0.05, || format!("{summary}: N=1 below N=0"))?;
    ensure(t(Kind::Moa3) >= t(Kind::Moa1) - 0.05, || format!("{summary}: N=3 below N=1"))?;
    let took = within_budget(start, Duration::from_secs(3600))?;
    Ok(format!("{summary} ({took} including training)"))
}

fn lsa_trend(taus: &HashMap<Kind, (f64, usize)>) -> Check {
    let (full, raw) = (taus[&Kind::Moa0].0, taus[&Kind::Moa0NoLsa].0);
    let msg = format!("tau MoA N=0 {full:.3}, without LSA {raw:.3}");
    ensure(raw <= full + 0.05, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------------------
// 10. Disconnection continuity

fn disconnection(lab: &Lab) -> Check {
    let t = &lab.target;
    let mut runs = 0;
    let mut offline = 0;
    for kind in Kind::ALL {
        let d = lab.drafter(kind);
        for cut in [1, 10, 25] {
            for (i, p) in lab.prompts.iter().take(3).enumerate() {
                let cfg = SessionConfig {
                    mode: tree_mode(),
                    max_new: MAX_NEW,
                    disconnect_after: Some(cut),
                };
                let net = NetworkSim::new(NetworkProfile::four_g(), (cut * 10 + i) as u64)?;
                let mut link = SimLink::new(Server::new(t, d), p, net);
                let mut client = Client::new(d);
                let out = run_session(&mut client, &mut link, p, &cfg)?;
                let m = &out.metrics;
                let Some(at) = m.cut_at else {
                    ensure(out.tokens.last() == Some(&t.config.eos_token), || {
                        format!("{kind:?} cut {cut}: session ended early without the end token")
                    })?;
                    continue;
                };
                ensure(m.calls_after_cut == 0, || format!("{kind:?}: network used after the cut"))?;
                if cut == 1 {
                    ensure(at == 1 && m.target_calls == 0, || "B=1 must verify exactly one token".into())?;
                }
                let room = t.config.max_seq - client.state.verified_len();
                let oracle = standalone_continuation(d, &client.history, (MAX_NEW - at).min(room))?;
                ensure(out.tokens[at..] == oracle[..], || {
                    format!("{kind:?} cut {cut}: continuation differs from the standalone drafter")
                })?;
                ensure(out.tokens.len() == MAX_NEW || out.tokens.last() == Some(&t.config.eos_token), || {
                    format!("{kind:?} cut {cut}: incomplete continuation")
                })?;
                runs += 1;
                offline += m.offline_tokens;
            }
        }
    }
    for cut in [1, 10, 25] {
        let cfg = SessionConfig {
            mode: tree_mode(),
            max_new: MAX_NEW,
            disconnect_after: Some(cut),
        };
        let out = socket_session(t, lab.drafter(Kind::Moa0), &lab.prompts[0], &cfg)?;
        ensure(out.metrics.calls_after_cut == 0, || "socket used after the cut".into())?;
    }
    Ok(format!(
        "{runs} cut sessions, {offline} offline tokens identical to the standalone oracle; zero post-cut calls (simulated and socket)"
    ))
}

// ---------------------------------------------------------------------------
// 11. Transport transparency

fn transparency(lab: &Lab) -> Check {
    let t = &lab.target;
    let mut sessions = 0;
    let mut drops = 0;
    for drop in [0.0, 0.001] {
        let mut profile = NetworkProfile::four_g();
        profile.drop_prob = drop;
        for (i, p) in lab.prompts.iter().enumerate() {
            let kind = Kind::ALL[i % Kind::ALL.len()];
            let mode = if i % 2 == 0 { tree_mode() } else { DraftMode::Chain { k: 5 } };
            let cfg = SessionConfig {
                mode,
                max_new: MAX_NEW,
                disconnect_after: None,
            };
            let out = simulate_session(t, lab.drafter(kind), &profile, 1000 + i as u64, p, &cfg)?;
            let single = vanilla_decode(t, p, &mut Sampler::Greedy, MAX_NEW)?;
            ensure(out.tokens == single, || format!("drop {drop} prompt {i} {kind:?} diverged"))?;
            sessions += 1;
            drops += out.metrics.link.drops;
        }
    }
    Ok(format!("{sessions} sessions identical to single-device decoding ({drops} dropped packets recovered)"))
}

// ---------------------------------------------------------------------------

fn oracle_sanity(lab: &Lab) -> anyhow::Result<()> {
    let mut oracle = TargetOracle::new(&lab.target);
    let ep = run_episode(&lab.target, &mut oracle, &lab.prompts[0], DraftMode::Chain { k: 4 }, &mut Sampler::Greedy, 20)?;
    ensure(ep.metrics.cycles.iter().all(|c| c.accepted == c.drafted), || {
        "target-as-drafter should accept every draft".into()
    })
}

fn main() {
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let run_start = Instant::now();
    results.push((2, "distribution preservation", distribution_preservation()));
    results.push((5, "gradient correctness", gradient_correctness()));
    results.push((6, "byte-formula conformance", byte_formulas()));
    results.push((7, "network profile fidelity", network_fidelity()));
    match build_lab() {
        Ok(lab) => {
            log(&format!("training took {:.1?}", lab.training_time));
            if let Err(e) = oracle_sanity(&lab) {
                log(&format!("oracle sanity failed: {e}"));
            }
            results.push((1, "losslessness", losslessness(&lab)));
            results.push((3, "top-layer factorization", tli_factorization(&lab)));
            results.push((4, "K-step boundedness", k_step_boundedness(&lab)));
            match mean_taus(&lab) {
                Ok(taus) => {
                    results.push((8, "ablation trend", ablation_trend(&taus, run_start)));
                    results.push((9, "LSA ablation trend", lsa_trend(&taus)));
                }
                Err(e) => {
                    let msg = format!("{e:#}");
                    results.push((8, "ablation trend", Err(anyhow::anyhow!(msg.clone()))));
                    results.push((9, "LSA ablation trend", Err(anyhow::anyhow!(msg))));
                }
            }
            results.push((10, "disconnection continuity", disconnection(&lab)));
            results.push((11, "transport transparency", transparency(&lab)));
        }
        Err(e) => {
            for (id, name) in [
                (1, "losslessness"),
                (3, "top-layer factorization"),
                (4, "K-step boundedness"),
                (8, "ablation trend"),
                (9, "LSA ablation trend"),
                (10, "disconnection continuity"),
                (11, "transport transparency"),
            ] {
                results.push((id, name, Err(anyhow::anyhow!("model training failed: {e:#}"))));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    let mut err = std::io::stderr();
    for (id, name, r) in &results {
        match r {
            Ok(detail) => {
                let _ = writeln!(err, "PASS criterion {id:>2} {name}: {detail}");
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(err, "FAIL criterion {id:>2} {name}: {e:#}");
            }
        }
    }
    let _ = writeln!(err, "acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
