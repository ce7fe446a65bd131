//! Prefix attention, frozen backbone and client forward pass.

use evifed_core::evidential::batch_loss;
use evifed_core::gradcheck::{numeric_gradient, relative_error, STEP};
use evifed_core::model::{
    forward_logits, prefix_attention, vanilla_attention, AnswerHead, Backbone, BackboneConfig, ClientNodes,
    HeadConfig, Modality, PromptConfig, PromptKind, PromptSet,
};
use evifed_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn empty_prefix_is_bitwise_vanilla() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = [1, 2, 4][seed as usize % 3];
        let m = 4 * rng.random_range(1..4);
        let (n, l) = (rng.random_range(1..7), rng.random_range(1..7));
        let (q, k, v) = (random(&mut rng, n, m), random(&mut rng, l, m), random(&mut rng, l, m));
        let empty = Tensor::zeros(vec![0, m]);
        let a = prefix_attention(&q, &k, &v, &empty, &empty, heads).unwrap();
        let b = vanilla_attention(&q, &k, &v, heads).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "seed {seed}");
    }
}

#[test]
fn prefix_keeps_query_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (q, k, v) = (random(&mut rng, 5, 8), random(&mut rng, 3, 8), random(&mut rng, 3, 8));
    for d in [0, 2, 8] {
        let (pk, pv) = (random(&mut rng, d / 2, 8), random(&mut rng, d / 2, 8));
        let pk = if d == 0 { Tensor::zeros(vec![0, 8]) } else { pk };
        let pv = if d == 0 { Tensor::zeros(vec![0, 8]) } else { pv };
        assert_eq!(prefix_attention(&q, &k, &v, &pk, &pv, 2).unwrap().shape(), &[5, 8]);
    }
}

#[test]
fn prefix_matches_explicit_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, k, v) = (random(&mut rng, 3, 4), random(&mut rng, 2, 4), random(&mut rng, 2, 4));
    let (pk, pv) = (random(&mut rng, 2, 4), random(&mut rng, 2, 4));
    let cat = |a: &Tensor, b: &Tensor| {
        Tensor::matrix(a.rows() + b.rows(), 4, a.data().iter().chain(b.data()).copied().collect()).unwrap()
    };
    let a = prefix_attention(&q, &k, &v, &pk, &pv, 2).unwrap();
    let b = vanilla_attention(&q, &cat(&pk, &k), &cat(&pv, &v), 2).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-14);
    }
}

struct Fixture {
    cfg: BackboneConfig,
    backbone: Backbone,
    head: AnswerHead,
    images: Vec<Vec<f64>>,
    questions: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

fn fixture(seed: u64, batch: usize) -> Fixture {
    let cfg = BackboneConfig::default();
    let backbone = Backbone::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_cfg = HeadConfig { hidden: 16, dropout: 0.0 };
    let head = AnswerHead::new(cfg.feature_dim(), cfg.answer_count, &head_cfg, &mut rng).unwrap();
    let images = (0..batch)
        .map(|_| (0..cfg.image_pixels()).map(|_| rng.random::<f64>()).collect())
        .collect();
    let questions = (0..batch)
        .map(|_| (0..cfg.max_question_len).map(|_| rng.random_range(0..cfg.question_vocab)).collect())
        .collect();
    let labels = (0..batch).map(|_| rng.random_range(0..cfg.answer_count)).collect();
    Fixture {
        cfg,
        backbone,
        head,
        images,
        questions,
        labels,
    }
}

impl Fixture {
    fn loss(&self, prompts: &PromptSet, g: &mut Graph, trainable: bool) -> (ClientNodes, f64, evifed_core::Var) {
        let t = prompts.to_tensor();
        let nodes = ClientNodes {
            prompts: if trainable { g.param(t) } else { g.constant(t) },
            head: if trainable { g.param(self.head.to_tensor()) } else { g.constant(self.head.to_tensor()) },
        };
        let images: Vec<&[f64]> = self.images.iter().map(Vec::as_slice).collect();
        let questions: Vec<&[usize]> = self.questions.iter().map(Vec::as_slice).collect();
        let logits =
            forward_logits(g, &self.backbone, prompts, &self.head, nodes, &images, &questions, None).unwrap();
        let loss = batch_loss(g, logits, &self.labels, 0.1).unwrap();
        (nodes, g.value(loss).item().unwrap(), loss)
    }
}

#[test]
fn empty_prompts_equal_promptless_forward() {
    let f = fixture(1, 3);
    let prompts = PromptSet::zeros(&PromptConfig { length: 0, blocks: vec![0, 1, 2, 3] }, &f.cfg).unwrap();
    let images: Vec<&[f64]> = f.images.iter().map(Vec::as_slice).collect();
    let questions: Vec<&[usize]> = f.questions.iter().map(Vec::as_slice).collect();

    let mut g = Graph::new();
    let nodes = ClientNodes {
        prompts: g.constant(prompts.to_tensor()),
        head: g.constant(f.head.to_tensor()),
    };
    let with = forward_logits(&mut g, &f.backbone, &prompts, &f.head, nodes, &images, &questions, None).unwrap();

    let mut h = Graph::new();
    let features = f.backbone.features(&mut h, &images, &questions, None).unwrap();
    let head = h.constant(f.head.to_tensor());
    let without = f.head.forward(&mut h, features, head, None).unwrap();

    let (a, b) = (g.value(with).data(), h.value(without).data());
    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn only_prompts_and_head_are_trainable() {
    let f = fixture(2, 4);
    let before = f.backbone.checksum();
    let prompts = PromptSet::random(&PromptConfig::default(), &f.cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let (nodes, _, loss) = f.loss(&prompts, &mut g, true);
    g.backward(loss).unwrap();
    assert_eq!(g.trainable_leaves(), vec![nodes.prompts, nodes.head]);
    assert!(g.grad(nodes.prompts).unwrap().iter().any(|&v| v != 0.0));
    assert_eq!(f.backbone.checksum(), before);
}

#[test]
fn prompt_key_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let f = fixture(10 + seed, 3);
        let cfg = PromptConfig { length: 4, blocks: vec![0, 2] };
        let prompts = PromptSet::random(&cfg, &f.cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut g = Graph::new();
        let (nodes, _, loss) = f.loss(&prompts, &mut g, true);
        g.backward(loss).unwrap();
        let grad = g.grad(nodes.prompts).unwrap().to_vec();

        let n = prompts.array_len();
        let offsets: Vec<usize> = prompts
            .slots()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == PromptKind::Key)
            .map(|(i, _)| i * n)
            .collect();
        assert_eq!(offsets.len(), 4);
        for start in offsets {
            let base = prompts.as_slice()[start..start + n].to_vec();
            let numeric = numeric_gradient(
                |x| {
                    let mut p = prompts.clone();
                    p.as_mut_slice()[start..start + n].copy_from_slice(x);
                    f.loss(&p, &mut Graph::new(), false).1
                },
                &base,
                STEP,
            );
            let err = relative_error(&grad[start..start + n], &numeric);
            assert!(err < 1e-5, "seed {seed} offset {start}: {err:e}");
        }
    }
}

#[test]
fn trainable_count_for_defaults() {
    let cfg = BackboneConfig::default();
    let prompts = PromptSet::zeros(&PromptConfig::default(), &cfg).unwrap();
    assert_eq!(prompts.len(), 2 * 4 * 8 * 32);
    let head = AnswerHead::new(cfg.feature_dim(), cfg.answer_count, &HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(prompts.len() + head.len(), 2048 + 64 * 64 + 64 + 64 * 8 + 8);
    // depth only matters through the prompted block list
    let deep = BackboneConfig { blocks: 12, ..cfg.clone() };
    assert_eq!(PromptSet::zeros(&PromptConfig::default(), &deep).unwrap().len(), prompts.len());
}

#[test]
fn prompts_only_touch_their_blocks() {
    let f = fixture(3, 2);
    let cfg = PromptConfig { length: 2, blocks: vec![1] };
    let mut prompts = PromptSet::zeros(&cfg, &f.cfg).unwrap();
    let base = f.loss(&prompts, &mut Graph::new(), false).1;
    let n = prompts.array_len();
    // the question key array at block 1 is slot 2 in layout order
    assert!(prompts.array(Modality::Question, 1, PromptKind::Key).is_some());
    prompts.as_mut_slice()[2 * n..3 * n].iter_mut().for_each(|v| *v = 3.0);
    let changed = f.loss(&prompts, &mut Graph::new(), false).1;
    assert_ne!(base, changed);
}
