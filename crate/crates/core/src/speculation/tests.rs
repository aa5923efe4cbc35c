use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::drafters::{DraftModel, DrafterConfig, Variant};
use crate::target_model::{forward_full, vanilla_decode, ModelConfig, ModelWeights, Sampler, StateSnapshot};

fn target(seed: u64, max_seq: usize) -> ModelWeights {
    let cfg = ModelConfig {
        vocab_size: 32,
        layers: 4,
        embed: 16,
        kv_embed: 8,
        heads: 4,
        mlp_hidden: 24,
        max_seq,
        ..ModelConfig::default()
    };
    ModelWeights::init(cfg, seed).unwrap()
}

fn drafter(target: &Arc<ModelWeights>, variant: Variant, n: usize, seed: u64) -> DraftModel {
    let cfg = DrafterConfig {
        variant,
        n,
        lsa_kv: 8,
        lsa_heads: 2,
        lsa_mlp: 16,
        sa_kv: 8,
        sa_heads: 4,
        sa_mlp: 16,
        ca_kv: 8,
        ca_heads: 4,
        ca_mlp: 16,
        eagle_kv: 8,
        eagle_heads: 4,
        eagle_mlp: 16,
        independent_layers: 1,
        independent_mlp: 16,
        init_seed: seed,
        ..DrafterConfig::default()
    };
    DraftModel::init(cfg, Arc::clone(target)).unwrap()
}

fn prompt(seed: u64, len: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(1..32)).collect()
}

/// Hand-specified drafter: logits are a function of the drafted path.
struct TableSource<F: Fn(&[u32]) -> Vec<f32>> {
    table: F,
    paths: Vec<Vec<u32>>,
}

impl<F: Fn(&[u32]) -> Vec<f32>> TableSource<F> {
    fn new(table: F) -> Self {
        Self { table, paths: Vec::new() }
    }
}

impl<F: Fn(&[u32]) -> Vec<f32>> DraftSource for TableSource<F> {
    fn commit(&mut self, _: &StateSnapshot, _: usize, _: u32) -> crate::Result<()> {
        Ok(())
    }
    fn root(&mut self) -> crate::Result<Vec<f32>> {
        self.paths = vec![Vec::new()];
        Ok((self.table)(&[]))
    }
    fn extend(&mut self, parent: usize, token: u32) -> crate::Result<(usize, Vec<f32>)> {
        let mut p = self.paths[parent].clone();
        p.push(token);
        let logits = (self.table)(&p);
        self.paths.push(p);
        Ok((self.paths.len() - 1, logits))
    }
}

fn hashed_logits(seed: u64, path: &[u32], vocab: usize) -> Vec<f32> {
    let mut h = seed;
    for &t in path {
        h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    (0..vocab).map(|_| rng.gen_range(-2.0f32..2.0)).collect()
}

/// Wraps another source and perturbs its logits with path-dependent noise.
struct Noisy<S: DraftSource> {
    inner: S,
    scale: f32,
    paths: Vec<Vec<u32>>,
    handles: Vec<usize>,
}

impl<S: DraftSource> Noisy<S> {
    fn new(inner: S, scale: f32) -> Self {
        Self {
            inner,
            scale,
            paths: Vec::new(),
            handles: Vec::new(),
        }
    }
    fn perturb(&self, path: &[u32], logits: Vec<f32>) -> Vec<f32> {
        let noise = hashed_logits(99, path, logits.len());
        logits.iter().zip(noise).map(|(l, n)| l + self.scale * n).collect()
    }
}

impl<S: DraftSource> DraftSource for Noisy<S> {
    fn commit(&mut self, snap: &StateSnapshot, start: usize, pending: u32) -> crate::Result<()> {
        self.inner.commit(snap, start, pending)
    }
    fn root(&mut self) -> crate::Result<Vec<f32>> {
        self.paths = vec![Vec::new()];
        self.handles = vec![ROOT_HANDLE];
        let l = self.inner.root()?;
        Ok(self.perturb(&[], l))
    }
    fn extend(&mut self, parent: usize, token: u32) -> crate::Result<(usize, Vec<f32>)> {
        let (h, l) = self.inner.extend(self.handles[parent], token)?;
        let mut p = self.paths[parent].clone();
        p.push(token);
        let l = self.perturb(&p, l);
        self.paths.push(p);
        self.handles.push(h);
        Ok((self.paths.len() - 1, l))
    }
}

/// Oracle drafter whose favourite token is never the target's argmax.
struct Contrarian<'w>(TargetOracle<'w>);

fn demote_best(mut l: Vec<f32>) -> Vec<f32> {
    let best = crate::numerics::argmax(&l);
    l[best] = -1e9;
    l
}

impl DraftSource for Contrarian<'_> {
    fn commit(&mut self, snap: &StateSnapshot, start: usize, pending: u32) -> crate::Result<()> {
        self.0.commit(snap, start, pending)
    }
    fn root(&mut self) -> crate::Result<Vec<f32>> {
        self.0.root().map(demote_best)
    }
    fn extend(&mut self, parent: usize, token: u32) -> crate::Result<(usize, Vec<f32>)> {
        let (h, l) = self.0.extend(parent, token)?;
        Ok((h, demote_best(l)))
    }
}

/// Target state after `prompt` with the pending token, ready for one cycle.
fn primed(w: &ModelWeights, prompt: &[u32]) -> (StateSnapshot, u32) {
    let (snap, logits) = forward_full(w, prompt).unwrap();
    let pending = crate::numerics::argmax(logits.row(prompt.len() - 1)) as u32;
    (snap, pending)
}

fn snapshot_gap(a: &StateSnapshot, b: &StateSnapshot) -> f32 {
    assert_eq!(a.tokens, b.tokens);
    let mut worst = 0.0f32;
    for l in 0..a.cache.layer_count() {
        for (x, y) in a.cache.keys(l).iter().zip(b.cache.keys(l)) {
            worst = worst.max((x - y).abs());
        }
        for (x, y) in a.cache.values(l).iter().zip(b.cache.values(l)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

#[test]
fn breadth_one_is_chain_drafting() {
    let w = Arc::new(target(1, 96));
    let model = drafter(&w, Variant::Moa, 1, 3);
    let p = prompt(2, 9);
    let (snap, pending) = primed(&w, &p);
    let mut d = ModelDrafter::new(&model);
    d.commit(&snap, 0, pending).unwrap();
    let tree = build_tree(&mut d, TreeShape::chain(5)).unwrap();
    let mut reference = ModelDrafter::new(&model);
    reference.commit(&snap, 0, pending).unwrap();
    let chain = reference.state.continue_greedy(&model, 5, None).unwrap();
    assert_eq!(tree.tokens(), chain);
    assert_eq!(tree.max_depth(), 5);
    assert!(tree.nodes.iter().enumerate().all(|(i, n)| n.parent == i.checked_sub(1)));
}

fn ln_table(path: &[u32]) -> Vec<f32> {
    let probs: [f64; 5] = match path {
        [] => [0.05, 0.5, 0.3, 0.1, 0.05],
        [1] => [0.05, 0.05, 0.1, 0.7, 0.1],
        [2] => [0.8, 0.05, 0.05, 0.05, 0.05],
        [3] => [0.2, 0.2, 0.2, 0.2, 0.2],
        _ => [0.1, 0.3, 0.2, 0.25, 0.15],
    };
    probs.iter().map(|p| p.ln() as f32).collect()
}

/// Every prefix of length 1..=depth over a 5-token vocabulary with its joint
/// probability, best first.
fn enumerate_prefixes(depth: usize) -> Vec<(Vec<u32>, f64)> {
    let mut out = Vec::new();
    let mut frontier: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
    for _ in 0..depth {
        let mut next = Vec::new();
        for (path, p) in &frontier {
            let logits = ln_table(path);
            let z: f64 = logits.iter().map(|&l| (l as f64).exp()).sum();
            for (t, &l) in logits.iter().enumerate() {
                let mut q = path.clone();
                q.push(t as u32);
                next.push((q, p * (l as f64).exp() / z));
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

fn node_paths(tree: &DraftTree) -> Vec<Vec<u32>> {
    let mut v: Vec<Vec<u32>> = (0..tree.len())
        .map(|i| tree.path(i).iter().map(|&j| tree.nodes[j].token).collect())
        .collect();
    v.sort();
    v
}

#[test]
fn small_tree_matches_exhaustive_enumeration() {
    let mut src = TableSource::new(ln_table);
    let tree = build_tree(
        &mut src,
        TreeShape {
            breadth: 2,
            depth: 2,
            budget: 4,
        },
    )
    .unwrap();
    let mut expected: Vec<Vec<u32>> = enumerate_prefixes(2).into_iter().take(4).map(|(p, _)| p).collect();
    expected.sort();
    assert_eq!(node_paths(&tree), expected);
    let all = enumerate_prefixes(2);
    for i in 0..tree.len() {
        let path: Vec<u32> = tree.path(i).iter().map(|&j| tree.nodes[j].token).collect();
        let (_, prob) = all.iter().find(|(p, _)| *p == path).unwrap();
        assert!((tree.nodes[i].joint_logprob.exp() - prob).abs() < 1e-6);
    }
}

#[test]
fn budget_equal_to_breadth_keeps_only_first_level() {
    // Children are spread thin, so no depth-2 path outranks a first-level token.
    let mut src = TableSource::new(|p: &[u32]| if p.is_empty() { ln_table(p) } else { vec![0.0; 5] });
    let tree = build_tree(
        &mut src,
        TreeShape {
            breadth: 2,
            depth: 4,
            budget: 2,
        },
    )
    .unwrap();
    assert_eq!(tree.len(), 2);
    assert!(tree.nodes.iter().all(|n| n.depth == 1));
    assert_eq!(tree.tokens(), vec![1, 2]);
}

#[test]
fn invalid_shape_is_config_error() {
    let mut src = TableSource::new(ln_table);
    for s in [
        TreeShape { breadth: 0, depth: 2, budget: 2 },
        TreeShape { breadth: 2, depth: 0, budget: 2 },
        TreeShape { breadth: 3, depth: 2, budget: 2 },
    ] {
        assert!(matches!(build_tree(&mut src, s), Err(crate::Error::Config(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn built_trees_satisfy_invariants(seed in 0u64..10_000, b in 1usize..5, d in 1usize..5, extra in 0usize..12) {
        let m = b + extra;
        let mut src = TableSource::new(|p: &[u32]| hashed_logits(seed, p, 9));
        let shape = TreeShape { breadth: b, depth: d, budget: m };
        let tree = build_tree(&mut src, shape).unwrap();
        tree.check_invariants(&shape).unwrap();
        let pool = b + (d - 1) * b * b;
        prop_assert_eq!(tree.len(), m.min(pool));
        // Ancestor closure: every kept node's path is inside the tree.
        for i in 0..tree.len() {
            prop_assert!(tree.path(i).iter().all(|&j| j <= i));
        }
    }
}

#[test]
fn perfect_drafter_chain_accepts_everything() {
    let w = target(4, 96);
    let p = prompt(5, 7);
    let (mut snap, pending) = primed(&w, &p);
    let mut oracle = TargetOracle::new(&w);
    oracle.commit(&snap, 0, pending).unwrap();
    let tree = build_tree(&mut oracle, TreeShape::chain(6)).unwrap();
    let o = verify_greedy(&w, &mut snap, pending, &tree).unwrap();
    assert_eq!(o.accepted_count, 6);
    assert_eq!(o.tokens_appended, 7);
}

#[test]
fn contrarian_drafter_is_always_rejected() {
    let w = target(4, 96);
    let p = prompt(6, 7);
    let (mut snap, pending) = primed(&w, &p);
    let mut d = Contrarian(TargetOracle::new(&w));
    d.commit(&snap, 0, pending).unwrap();
    let tree = build_tree(&mut d, TreeShape::chain(4)).unwrap();
    let before = snap.len();
    let o = verify_greedy(&w, &mut snap, pending, &tree).unwrap();
    assert_eq!(o.accepted_count, 0);
    assert_eq!(o.tokens_appended, 1);
    assert_eq!(snap.len(), before + 1);
    let expected = vanilla_decode(&w, &p, &mut Sampler::Greedy, 2).unwrap()[1];
    assert_eq!(o.bonus_token, expected);
}

/// Verifies every root-to-leaf chain separately and returns the longest
/// accepted token run with its bonus.
fn best_branch(w: &ModelWeights, snap: &StateSnapshot, pending: u32, tree: &DraftTree) -> (Vec<u32>, u32) {
    let mut best: Option<(Vec<u32>, u32)> = None;
    for leaf in tree.leaves() {
        let tokens: Vec<u32> = tree.path(leaf).iter().map(|&i| tree.nodes[i].token).collect();
        let mut s = snap.clone();
        let o = verify_greedy(w, &mut s, pending, &DraftTree::chain(&tokens)).unwrap();
        let acc = tokens[..o.accepted_count].to_vec();
        if best.as_ref().map_or(true, |(b, _)| acc.len() > b.len()) {
            best = Some((acc, o.bonus_token));
        }
    }
    best.unwrap()
}

#[test]
fn second_branch_match_is_found() {
    let w = target(7, 96);
    let p = prompt(8, 6);
    let (snap, pending) = primed(&w, &p);
    let truth = vanilla_decode(&w, &p, &mut Sampler::Greedy, 5).unwrap();
    let wrong = |t: u32| if t == 1 { 2 } else { 1 };
    let tree = DraftTree::from_parents(&[
        (wrong(truth[1]), None),
        (truth[2], Some(0)),
        (truth[1], None),
        (truth[2], Some(2)),
        (truth[3], Some(3)),
        (wrong(truth[4]), Some(4)),
    ])
    .unwrap();
    let mut s = snap.clone();
    let o = verify_greedy(&w, &mut s, pending, &tree).unwrap();
    assert_eq!(o.accepted_path, vec![2, 3, 4]);
    assert_eq!(o.bonus_token, truth[4]);
    let (acc, bonus) = best_branch(&w, &snap, pending, &tree);
    assert_eq!(acc, truth[1..4].to_vec());
    assert_eq!(bonus, o.bonus_token);
}

#[test]
fn bad_parent_is_structure_error() {
    let w = target(7, 96);
    let (mut snap, pending) = primed(&w, &[3, 4]);
    let tree = DraftTree {
        nodes: vec![DraftNode {
            token: 1,
            parent: Some(3),
            depth: 2,
            logprob: 0.0,
            joint_logprob: 0.0,
        }],
    };
    assert!(matches!(verify_greedy(&w, &mut snap, pending, &tree), Err(crate::Error::Structure(_))));
    assert!(DraftTree::from_parents(&[(1, Some(0))]).is_err());
    assert!(DraftTree::from_parents(&[(1, None), (1, None)]).is_err());
}

#[test]
fn out_of_vocab_tree_token_is_rejected() {
    let w = target(7, 96);
    let (mut snap, pending) = primed(&w, &[3, 4]);
    let tree = DraftTree::chain(&[40]);
    assert!(matches!(verify_greedy(&w, &mut snap, pending, &tree), Err(crate::Error::Bounds { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tree_verification_equals_best_branch(seed in 0u64..1000, scale in 0.0f32..3.0) {
        let w = target(11, 96);
        let p = prompt(seed, 5);
        let (snap, pending) = primed(&w, &p);
        let mut src = Noisy::new(TargetOracle::new(&w), scale);
        src.commit(&snap, 0, pending).unwrap();
        let tree = build_tree(&mut src, TreeShape { breadth: 3, depth: 3, budget: 9 }).unwrap();
        let mut s = snap.clone();
        let o = verify_greedy(&w, &mut s, pending, &tree).unwrap();
        let got: Vec<u32> = o.accepted_path.iter().map(|&i| tree.nodes[i].token).collect();
        let (acc, bonus) = best_branch(&w, &snap, pending, &tree);
        prop_assert_eq!(got, acc);
        prop_assert_eq!(o.bonus_token, bonus);
    }

    #[test]
    fn larger_budget_never_shortens_acceptance(seed in 0u64..1000, scale in 0.5f32..3.0) {
        let w = target(12, 96);
        let p = prompt(seed, 5);
        let (snap, pending) = primed(&w, &p);
        let mut last = 0;
        for m in 2..=14 {
            let mut src = Noisy::new(TargetOracle::new(&w), scale);
            src.commit(&snap, 0, pending).unwrap();
            let tree = build_tree(&mut src, TreeShape { breadth: 2, depth: 4, budget: m }).unwrap();
            let mut s = snap.clone();
            let a = verify_greedy(&w, &mut s, pending, &tree).unwrap().accepted_count;
            prop_assert!(a >= last, "m={} gave {} after {}", m, a, last);
            last = a;
        }
    }

    #[test]
    fn verified_state_equals_fresh_forward(seed in 0u64..1000, scale in 0.0f32..2.0) {
        let w = target(13, 96);
        let p = prompt(seed, 6);
        let (mut snap, pending) = primed(&w, &p);
        let mut src = Noisy::new(TargetOracle::new(&w), scale);
        let mut pending = pending;
        let mut start = 0;
        for _ in 0..3 {
            src.commit(&snap, start, pending).unwrap();
            start = snap.len();
            let tree = build_tree(&mut src, TreeShape { breadth: 2, depth: 3, budget: 6 }).unwrap();
            let o = verify_greedy(&w, &mut snap, pending, &tree).unwrap();
            let (fresh, _) = forward_full(&w, &snap.tokens).unwrap();
            prop_assert!(snapshot_gap(&snap, &fresh) <= 1e-5);
            pending = o.bonus_token;
        }
    }
}

#[test]
fn greedy_episodes_match_vanilla_decoding() {
    let w = Arc::new(target(21, 96));
    let models: Vec<DraftModel> = vec![
        drafter(&w, Variant::Moa, 0, 1),
        drafter(&w, Variant::Moa, 2, 2),
        drafter(&w, Variant::Eagle, 0, 3),
        drafter(&w, Variant::Independent, 0, 4),
    ];
    let modes = [
        DraftMode::Chain { k: 4 },
        DraftMode::Tree(TreeShape {
            breadth: 2,
            depth: 3,
            budget: 5,
        }),
    ];
    for i in 0..100u64 {
        let p = prompt(1000 + i, 3 + (i as usize % 9));
        let model = &models[i as usize % models.len()];
        let mode = modes[(i as usize / models.len()) % 2];
        let mut d = ModelDrafter::new(model);
        let ep = run_episode(&w, &mut d, &p, mode, &mut Sampler::Greedy, 24).unwrap();
        let reference = vanilla_decode(&w, &p, &mut Sampler::Greedy, 24).unwrap();
        assert_eq!(ep.tokens, reference, "prompt {i}");
        assert_eq!(ep.metrics.target_calls, ep.metrics.cycles.len());
    }
}

#[test]
fn episode_stops_at_capacity_like_vanilla() {
    let w = Arc::new(target(22, 20));
    let model = drafter(&w, Variant::Moa, 1, 5);
    let p = prompt(3, 12);
    let mut d = ModelDrafter::new(&model);
    let mode = DraftMode::Tree(TreeShape {
        breadth: 2,
        depth: 4,
        budget: 6,
    });
    let ep = run_episode(&w, &mut d, &p, mode, &mut Sampler::Greedy, 8).unwrap();
    assert_eq!(ep.tokens, vanilla_decode(&w, &p, &mut Sampler::Greedy, 8).unwrap());
}

fn long_run_target() -> (ModelWeights, Vec<u32>) {
    for seed in 0..50 {
        let w = target(seed, 160);
        let p = prompt(seed, 8);
        let out = vanilla_decode(&w, &p, &mut Sampler::Greedy, 100).unwrap();
        if out.len() == 100 {
            return (w, p);
        }
    }
    panic!("no seed decodes 100 tokens without the end token");
}

#[test]
fn perfect_chain_drafter_needs_one_call_per_five_tokens() {
    let (w, p) = long_run_target();
    let mut oracle = TargetOracle::new(&w);
    let ep = run_episode(&w, &mut oracle, &p, DraftMode::Chain { k: 4 }, &mut Sampler::Greedy, 100).unwrap();
    assert_eq!(ep.tokens.len(), 100);
    assert_eq!(ep.metrics.target_calls, 20);
    assert_eq!(ep.metrics.total_accepted(), 80);
    assert_eq!(ep.metrics.tau_accept(), 4.0);
    assert_eq!(ep.metrics.tau_per_call(), 5.0);
}

#[test]
fn sampling_with_identical_drafter_accepts_all() {
    let (w, p) = long_run_target();
    let mut oracle = TargetOracle::new(&w);
    let mut sampler = Sampler::seeded(5, 1.0);
    let ep = run_episode(&w, &mut oracle, &p, DraftMode::Chain { k: 3 }, &mut sampler, 30).unwrap();
    let full: Vec<_> = ep.metrics.cycles.iter().filter(|c| c.drafted == 3).collect();
    assert!(full.iter().all(|c| c.accepted == 3));
}

#[test]
fn sampling_episode_with_trained_free_drafter_runs() {
    let w = Arc::new(target(23, 96));
    let model = drafter(&w, Variant::Moa, 0, 6);
    let mut d = ModelDrafter::new(&model);
    let mut sampler = Sampler::seeded(9, 0.8);
    let ep = run_episode(&w, &mut d, &prompt(4, 6), DraftMode::Chain { k: 3 }, &mut sampler, 20).unwrap();
    assert!(!ep.tokens.is_empty() && ep.tokens.len() <= 20);
    assert!(ep.metrics.cycles.iter().all(|c| c.accepted <= c.drafted));
    let mut d = ModelDrafter::new(&model);
    let tree = DraftMode::Tree(TreeShape::default());
    assert!(matches!(
        run_episode(&w, &mut d, &prompt(4, 6), tree, &mut sampler, 20),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn identical_distributions_always_accept() {
    let p = [0.1, 0.2, 0.3, 0.4];
    for x in 0..4 {
        assert_eq!(acceptance_probability(&p, &p, x).unwrap(), 1.0);
    }
}

#[test]
fn zero_drafter_mass_is_contract_violation() {
    let p = [0.5, 0.5];
    let q = [1.0, 0.0];
    assert!(matches!(acceptance_probability(&p, &q, 1), Err(crate::Error::Drafting(_))));
}

/// Exact output marginal of one draft-then-verify step, summed over every
/// drafted token and both accept/reject branches.
fn enumerated_marginal(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    let residual = residual_distribution(p, q);
    for x in 0..q.len() {
        if q[x] == 0.0 {
            continue;
        }
        let a = acceptance_probability(p, q, x as u32).unwrap();
        out[x] += q[x] * a;
        for (y, r) in residual.iter().enumerate() {
            out[y] += q[x] * (1.0 - a) * r;
        }
    }
    out
}

#[test]
fn two_token_example_by_enumeration() {
    let p = [0.5, 0.5];
    let q = [1.0, 0.0];
    assert_eq!(acceptance_probability(&p, &q, 0).unwrap(), 0.5);
    assert_eq!(residual_distribution(&p, &q), vec![0.0, 1.0]);
    let m = enumerated_marginal(&p, &q);
    assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
}

fn simplex(rng: &mut ChaCha8Rng, n: usize, zeros: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| if zeros && rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() + 1e-3 })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
    v
}

proptest! {
    #[test]
    fn one_step_marginal_equals_target(seed in 0u64..100_000, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = simplex(&mut rng, n, true);
        let q = simplex(&mut rng, n, true);
        let m = enumerated_marginal(&p, &q);
        for (a, b) in m.iter().zip(&p) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn sampled_step_matches_target_within_three_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let p = simplex(&mut rng, 5, false);
    let q = simplex(&mut rng, 5, false);
    let trials = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..trials {
        let x = sample_index(&mut rng, &q) as u32;
        let y = match speculative_step(&p, &q, x, &mut rng).unwrap() {
            StepOutcome::Accepted => x,
            StepOutcome::Rejected(y) => y,
        };
        counts[y as usize] += 1;
    }
    for (c, &pi) in counts.iter().zip(&p) {
        let sigma = (trials as f64 * pi * (1.0 - pi)).sqrt();
        assert!((*c as f64 - trials as f64 * pi).abs() <= 3.0 * sigma, "{counts:?} vs {p:?}");
    }
}

#[test]
fn tree_mask_sees_only_ancestors() {
    let tree = DraftTree::from_parents(&[(1, None), (2, None), (3, Some(0)), (4, Some(2))]).unwrap();
    let m = tree_mask(2, &tree).unwrap();
    assert_eq!(m.rows(), 5);
    assert_eq!(m.cols(), 7);
    let visible = |r: usize| (0..7).filter(|&c| m.allowed(r, c)).collect::<Vec<_>>();
    assert_eq!(visible(0), vec![0, 1, 2]);
    assert_eq!(visible(2), vec![0, 1, 2, 4]);
    assert_eq!(visible(4), vec![0, 1, 2, 3, 5, 6]);
}
