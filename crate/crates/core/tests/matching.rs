use headwise::autodiff::{Graph, Tensor, TensorError, Var};
use headwise::data::{aspect_labels, CLS_ID};
use headwise::encoder::{encode, EncodedVars, EncoderConfig, EncoderOutput};
use headwise::matching::{
    agg_concat, agg_maxpool, class_logits, classify_loss, element_features, match_bilinear,
    match_cosine, match_element, match_pair, multi_level_match, no_hier_match, single_level_match,
    AggFn, MatchConfig, MatchFn, Variant,
};
use headwise::model::{Model, ModelConfig};
use headwise::params::ParamStore;
use headwise::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
    g.constant(Tensor::row_vector(v.to_vec()).unwrap())
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn rand_matrix(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, r: usize, c: usize) -> Var {
    g.constant(Tensor::new(vec![r, c], rand_vec(rng, r * c)).unwrap())
}

/// `relu(x W + b)` with `W` stored row-major as `[x.len(), b.len()]`.
fn relu_affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = b.len();
    (0..cols)
        .map(|j| {
            (b[j]
                + x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi * w[i * cols + j])
                    .sum::<f64>())
            .max(0.0)
        })
        .collect()
}

fn encoder(layers: usize, heads: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        num_heads: heads,
        head_dim: d,
        ffn_dim: 16,
        max_seq_len: 8,
        vocab_size: 20,
        dropout_rate: 0.0,
    }
}

fn model(
    enc: EncoderConfig,
    variant: Variant,
    match_fn: MatchFn,
    agg_fn: AggFn,
    layers: Option<Vec<usize>>,
    seed: u64,
) -> Model<f64> {
    let matching = MatchConfig {
        variant,
        match_fn,
        agg_fn,
        layers,
        match_hidden: 6,
        num_classes: 2,
    };
    Model::init(
        ModelConfig {
            encoder: enc,
            matching,
            labels: aspect_labels(),
        },
        seed,
    )
    .unwrap()
}

fn random_output(
    rng: &mut ChaCha8Rng,
    layers: usize,
    heads: usize,
    d: usize,
) -> EncoderOutput<f64> {
    EncoderOutput {
        head_vectors: (0..layers)
            .map(|_| (0..heads).map(|_| rand_vec(rng, d)).collect())
            .collect(),
        cls_vectors: (0..layers).map(|_| rand_vec(rng, heads * d)).collect(),
        attention: Vec::new(),
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn cosine_examples() {
    let mut g = Graph::inference();
    let v = row(&mut g, &[0.3, -1.0, 2.5]);
    let (c, flag) = match_cosine(&mut g, v, v).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-15 && !flag);
    let (a, b) = (row(&mut g, &[1.0, 0.0]), row(&mut g, &[0.0, 1.0]));
    let c = match_cosine(&mut g, a, b).unwrap().0;
    assert_eq!(g.value(c).item(), 0.0);
    let (a, b) = (row(&mut g, &[1.0, 1.0]), row(&mut g, &[1.0, 0.0]));
    let c = match_cosine(&mut g, a, b).unwrap().0;
    assert!((g.value(c).item() - 0.70711).abs() < 1e-5);
}

#[test]
fn bilinear_examples() {
    let mut g = Graph::inference();
    let (a, b) = (
        row(&mut g, &[1.0, -2.0, 3.0]),
        row(&mut g, &[4.0, 5.0, -6.0]),
    );
    let eye = g.constant(
        Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap(),
    );
    let s = match_bilinear(&mut g, a, b, eye).unwrap();
    assert_eq!(g.value(s).item(), 4.0 - 10.0 - 18.0);
    let zero = g.constant(Tensor::zeros(vec![3, 3]));
    let s = match_bilinear(&mut g, a, b, zero).unwrap();
    assert_eq!(g.value(s).item(), 0.0);
    let short = row(&mut g, &[1.0, 2.0]);
    assert!(matches!(
        match_bilinear(&mut g, a, short, eye),
        Err(TensorError::Dimension(_))
    ));
}

#[test]
fn bilinear_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (hs, ht) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4));
    let mut p = ParamStore::new();
    p.insert(
        "wb",
        Tensor::new(vec![4, 4], rand_vec(&mut rng, 16)).unwrap(),
    );
    let report = headwise::autodiff::gradcheck::finite_diff_check(
        |g, p| {
            let (a, b) = (
                g.constant(Tensor::row_vector(hs.clone())?),
                g.constant(Tensor::row_vector(ht.clone())?),
            );
            let wb = g.param(p, "wb")?;
            let s = match_bilinear(g, a, b, wb)?;
            let sq = g.mul(s, s)?;
            Ok(g.sum_all(sq)?)
        },
        &p,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn element_feature_blocks() {
    let mut g = Graph::inference();
    let (a, b) = (row(&mut g, &[1.0, 2.0]), row(&mut g, &[3.0, 4.0]));
    let f = element_features(&mut g, a, b).unwrap();
    assert_eq!(
        g.value(f).data(),
        &[1.0, 2.0, 3.0, 4.0, -2.0, -2.0, 3.0, 8.0]
    );

    let v = row(&mut g, &[-3.0, 0.5, 7.0]);
    let f = element_features(&mut g, v, v).unwrap();
    assert_eq!(&g.value(f).data()[6..9], &[0.0, 0.0, 0.0]);
    assert_eq!(&g.value(f).data()[9..], &[9.0, 0.25, 49.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for width in [1, 3, 8] {
        let (a, b) = (
            row(&mut g, &rand_vec(&mut rng, width)),
            row(&mut g, &rand_vec(&mut rng, width)),
        );
        let w = rand_matrix(&mut g, &mut rng, 4 * width, 5);
        let bias = rand_matrix(&mut g, &mut rng, 1, 5);
        let bias = g.value(bias).data().to_vec();
        let bias = g.constant(Tensor::new(vec![5], bias).unwrap());
        let m = match_element(&mut g, a, b, w, bias).unwrap();
        assert_eq!(g.shape(m), &[1, 5]);
    }
    let short = row(&mut g, &[1.0]);
    assert!(element_features(&mut g, a, short).is_err());
}

#[test]
fn aggregation_errors() {
    let mut g = Graph::<f64>::inference();
    let w = g.constant(Tensor::zeros(vec![2, 2]));
    let b = g.constant(Tensor::zeros(vec![2]));
    assert!(matches!(
        agg_maxpool(&mut g, &[], w, b),
        Err(TensorError::Argument(_))
    ));
    let (x, y) = (row(&mut g, &[1.0, 2.0]), row(&mut g, &[1.0, 2.0, 3.0]));
    assert!(matches!(
        agg_concat(&mut g, &[x, y], w, b),
        Err(TensorError::Dimension(_))
    ));
}

#[test]
fn maxpool_pre_activation_is_the_coordinatewise_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for heads in 1..6 {
        let width = 4;
        let ms: Vec<Vec<f64>> = (0..heads).map(|_| rand_vec(&mut rng, width)).collect();
        let w = rand_vec(&mut rng, width * 3);
        let b = rand_vec(&mut rng, 3);
        let mut g = Graph::inference();
        let vars: Vec<Var> = ms.iter().map(|m| row(&mut g, m)).collect();
        let wv = g.constant(Tensor::new(vec![width, 3], w.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![3], b.clone()).unwrap());
        let o = agg_maxpool(&mut g, &vars, wv, bv).unwrap();
        let pooled: Vec<f64> = (0..width)
            .map(|j| ms.iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let expected = relu_affine(&pooled, &w, &b);
        for (x, e) in g.value(o).data().iter().zip(&expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }
}

#[test]
fn maxpool_ignores_head_order_over_many_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let heads = rng.gen_range(1..9);
        let width = rng.gen_range(1..7);
        let mut g = Graph::inference();
        let mut ms: Vec<Var> = (0..heads)
            .map(|_| {
                let v = rand_vec(&mut rng, width);
                row(&mut g, &v)
            })
            .collect();
        let w = rand_matrix(&mut g, &mut rng, width, 3);
        let b = g.constant(Tensor::new(vec![3], rand_vec(&mut rng, 3)).unwrap());
        let o1 = agg_maxpool(&mut g, &ms, w, b).unwrap();
        ms.shuffle(&mut rng);
        let o2 = agg_maxpool(&mut g, &ms, w, b).unwrap();
        assert_eq!(g.value(o1).data(), g.value(o2).data());
    }
}

#[test]
fn concat_is_order_sensitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::inference();
    let ms: Vec<Var> = (0..3)
        .map(|_| {
            let v = rand_vec(&mut rng, 2);
            row(&mut g, &v)
        })
        .collect();
    let w = rand_matrix(&mut g, &mut rng, 6, 4);
    let b = g.constant(Tensor::new(vec![4], vec![5.0; 4]).unwrap());
    let o1 = agg_concat(&mut g, &ms, w, b).unwrap();
    let o2 = agg_concat(&mut g, &[ms[2], ms[0], ms[1]], w, b).unwrap();
    assert_ne!(g.value(o1).data(), g.value(o2).data());

    // Scalar match representations concatenate to a length-I vector.
    let scalars: Vec<Var> = (0..4).map(|i| row(&mut g, &[i as f64])).collect();
    let joined = g.concat_last(&scalars).unwrap();
    assert_eq!(g.shape(joined), &[1, 4]);
}

#[test]
fn concat_weight_is_heads_times_maxpool_weight() {
    for heads in [1, 2, 4, 8] {
        for d in [8, 16] {
            let enc = encoder(2, heads, d);
            let cfg = |agg| MatchConfig {
                variant: Variant::SingleLevel,
                match_fn: MatchFn::Element,
                agg_fn: agg,
                layers: None,
                match_hidden: 64,
                num_classes: 2,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (mut pe, mut pc) = (ParamStore::<f32>::new(), ParamStore::<f32>::new());
            cfg(AggFn::MaxPool).init_params(&enc, &mut pe, &mut rng);
            cfg(AggFn::Concat).init_params(&enc, &mut pc, &mut rng);
            let we = pe.get("agg.head.w").unwrap().numel();
            let wc = pc.get("agg.head.w").unwrap().numel();
            assert_eq!(wc, heads * we);
            if heads == 4 {
                assert_eq!((wc, we), (16384, 4096));
            }
        }
    }
}

#[test]
fn param_counts_follow_closed_form() {
    let enc = encoder(3, 2, 8);
    for &variant in Variant::ALL {
        for &match_fn in MatchFn::ALL {
            for &agg_fn in AggFn::ALL {
                for layers in [None, Some(vec![0, 2])] {
                    let cfg = MatchConfig {
                        variant,
                        match_fn,
                        agg_fn,
                        layers,
                        match_hidden: 6,
                        num_classes: 3,
                    };
                    if cfg.validate(&enc).is_err() {
                        continue;
                    }
                    let mut p = ParamStore::<f64>::new();
                    cfg.init_params(&enc, &mut p, &mut ChaCha8Rng::seed_from_u64(0));
                    assert_eq!(
                        p.num_values(),
                        cfg.param_counts(&enc).total(),
                        "{variant} {match_fn} {agg_fn}"
                    );
                    let matching_only = p.num_values() - p.count_prefix("cls.");
                    let counts = cfg.param_counts(&enc);
                    assert_eq!(matching_only, counts.total() - counts.classifier);
                    if match_fn == MatchFn::Cosine {
                        assert_eq!(counts.match_fn, 0);
                    }
                }
            }
        }
    }
}

#[test]
fn single_level_matches_a_hand_unrolled_computation() {
    let enc = encoder(1, 2, 4);
    let m = model(
        enc.clone(),
        Variant::SingleLevel,
        MatchFn::Element,
        AggFn::MaxPool,
        None,
        3,
    );
    let a = encode(&enc, &m.params, &[CLS_ID, 5, 6]).unwrap();
    let b = encode(&enc, &m.params, &[CLS_ID, 9, 4, 7]).unwrap();
    let p = |n: &str| m.params.get(n).unwrap().data().to_vec();

    let mut ms = Vec::new();
    for i in 0..2 {
        let (hs, ht) = (&a.head_vectors[0][i], &b.head_vectors[0][i]);
        let mut feats = hs.clone();
        feats.extend(ht);
        feats.extend(hs.iter().zip(ht).map(|(x, y)| x - y));
        feats.extend(hs.iter().zip(ht).map(|(x, y)| x * y));
        ms.push(relu_affine(&feats, &p("match.g.w"), &p("match.g.b")));
    }
    let pooled: Vec<f64> = (0..6).map(|j| ms[0][j].max(ms[1][j])).collect();
    let expected = relu_affine(&pooled, &p("agg.head.w"), &p("agg.head.b"));

    let mut g = Graph::inference();
    let (va, vb) = (
        EncodedVars::from_output(&mut g, &a).unwrap(),
        EncodedVars::from_output(&mut g, &b).unwrap(),
    );
    let o = single_level_match(&mut g, &m.config.matching, &m.params, &va, &vb, 0).unwrap();
    for (x, e) in g.value(o).data().iter().zip(&expected) {
        assert!((x - e).abs() < 1e-12);
    }
    assert!(matches!(
        single_level_match(&mut g, &m.config.matching, &m.params, &va, &vb, 1),
        Err(Error::Argument(_))
    ));
}

#[test]
fn cosine_self_match_gives_ones() {
    let enc = encoder(2, 3, 4);
    let m = model(
        enc.clone(),
        Variant::SingleLevel,
        MatchFn::Cosine,
        AggFn::Concat,
        None,
        8,
    );
    let a = encode(&enc, &m.params, &[CLS_ID, 5, 6, 7]).unwrap();
    let mut g = Graph::inference();
    let va = EncodedVars::from_output(&mut g, &a).unwrap();
    let ms = headwise::matching::head_matches(&mut g, &m.config.matching, &m.params, &va, &va, 1)
        .unwrap();
    for v in ms {
        assert!((g.value(v).item() - 1.0).abs() < 1e-12);
    }
}

fn permute_heads(out: &EncoderOutput<f64>, order: &[usize]) -> EncoderOutput<f64> {
    let mut p = out.clone();
    for layer in p.head_vectors.iter_mut() {
        let orig = layer.clone();
        for (slot, &i) in layer.iter_mut().zip(order) {
            *slot = orig[i].clone();
        }
    }
    p
}

fn repr(m: &Model<f64>, a: &EncoderOutput<f64>, b: &EncoderOutput<f64>) -> Vec<f64> {
    let mut g = Graph::inference();
    let (va, vb) = (
        EncodedVars::from_output(&mut g, a).unwrap(),
        EncodedVars::from_output(&mut g, b).unwrap(),
    );
    let r = match_pair(&mut g, &m.config.matching, &m.params, &va, &vb).unwrap();
    g.value(r).data().to_vec()
}

#[test]
fn maxpool_model_is_invariant_to_consistent_head_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for variant in [
        Variant::SingleLevel,
        Variant::MultiLevel,
        Variant::MultiLevelNoHier,
    ] {
        let m = model(
            encoder(2, 4, 4),
            variant,
            MatchFn::Element,
            AggFn::MaxPool,
            None,
            2,
        );
        for _ in 0..20 {
            let (a, b) = (
                random_output(&mut rng, 2, 4, 4),
                random_output(&mut rng, 2, 4, 4),
            );
            let mut order: Vec<usize> = (0..4).collect();
            order.shuffle(&mut rng);
            assert_eq!(
                repr(&m, &a, &b),
                repr(&m, &permute_heads(&a, &order), &permute_heads(&b, &order))
            );
        }
    }
}

#[test]
fn multi_level_shapes_and_single_layer_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (a, b) = (
        random_output(&mut rng, 4, 2, 4),
        random_output(&mut rng, 4, 2, 4),
    );
    for layers in [vec![0], vec![0, 1], vec![0, 1, 2, 3]] {
        let m = model(
            encoder(4, 2, 4),
            Variant::MultiLevel,
            MatchFn::Element,
            AggFn::MaxPool,
            Some(layers),
            1,
        );
        assert_eq!(repr(&m, &a, &b).len(), 6);
    }

    // One selected layer: u = agg.layer(ReLU(o W^v + b^v)), with o the single-level result.
    let m = model(
        encoder(4, 2, 4),
        Variant::MultiLevel,
        MatchFn::Element,
        AggFn::MaxPool,
        Some(vec![3]),
        9,
    );
    let p = |n: &str| m.params.get(n).unwrap().data().to_vec();
    let mut g = Graph::inference();
    let (va, vb) = (
        EncodedVars::from_output(&mut g, &a).unwrap(),
        EncodedVars::from_output(&mut g, &b).unwrap(),
    );
    let o = single_level_match(&mut g, &m.config.matching, &m.params, &va, &vb, 3).unwrap();
    let v = relu_affine(
        g.value(o).data(),
        &p("agg.layer_map.w"),
        &p("agg.layer_map.b"),
    );
    let expected = relu_affine(&v, &p("agg.layer.w"), &p("agg.layer.b"));
    let u = multi_level_match(&mut g, &m.config.matching, &m.params, &va, &vb).unwrap();
    for (x, e) in g.value(u).data().iter().zip(&expected) {
        assert!((x - e).abs() < 1e-12);
    }
}

#[test]
fn no_hier_with_one_layer_equals_single_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for agg in [AggFn::MaxPool, AggFn::Concat] {
        let m = model(
            encoder(1, 3, 4),
            Variant::MultiLevelNoHier,
            MatchFn::Element,
            agg,
            None,
            4,
        );
        let (a, b) = (
            random_output(&mut rng, 1, 3, 4),
            random_output(&mut rng, 1, 3, 4),
        );
        let mut g = Graph::inference();
        let (va, vb) = (
            EncodedVars::from_output(&mut g, &a).unwrap(),
            EncodedVars::from_output(&mut g, &b).unwrap(),
        );
        let flat = no_hier_match(&mut g, &m.config.matching, &m.params, &va, &vb).unwrap();
        let single =
            single_level_match(&mut g, &m.config.matching, &m.params, &va, &vb, 0).unwrap();
        assert_eq!(g.value(flat).data(), g.value(single).data());
    }
    let m = model(
        encoder(3, 2, 4),
        Variant::MultiLevelNoHier,
        MatchFn::Element,
        AggFn::Concat,
        None,
        4,
    );
    assert_eq!(m.params.get("agg.head.w").unwrap().shape(), &[3 * 2 * 6, 6]);
}

#[test]
fn no_hier_differs_from_hierarchical() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (a, b) = (
        random_output(&mut rng, 2, 2, 4),
        random_output(&mut rng, 2, 2, 4),
    );
    let hier = model(
        encoder(2, 2, 4),
        Variant::MultiLevel,
        MatchFn::Element,
        AggFn::MaxPool,
        None,
        5,
    );
    let flat = model(
        encoder(2, 2, 4),
        Variant::MultiLevelNoHier,
        MatchFn::Element,
        AggFn::MaxPool,
        None,
        5,
    );
    assert_ne!(repr(&hier, &a, &b), repr(&flat, &a, &b));
}

#[test]
fn classic_uses_final_cls_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let m = model(
        encoder(2, 2, 4),
        Variant::Classic,
        MatchFn::Element,
        AggFn::MaxPool,
        None,
        6,
    );
    let (a, b) = (
        random_output(&mut rng, 2, 2, 4),
        random_output(&mut rng, 2, 2, 4),
    );
    assert_eq!(repr(&m, &a, &b).len(), 6);
    // Head vectors and earlier layers do not enter the classic representation.
    let mut a2 = random_output(&mut rng, 2, 2, 4);
    a2.cls_vectors[1] = a.cls_vectors[1].clone();
    assert_eq!(repr(&m, &a, &b), repr(&m, &a2, &b));
}

#[test]
#[allow(clippy::approx_constant)]
fn classifier_loss_examples() {
    let mut g = Graph::<f64>::new();
    let mut p = ParamStore::new();
    p.insert("cls.w", Tensor::zeros(vec![3, 2]));
    p.insert("cls.b", Tensor::zeros(vec![2]));
    let o = row(&mut g, &[0.5, -1.0, 2.0]);
    let (loss, logits) = classify_loss(&mut g, &p, &[o], &[1]).unwrap();
    assert_eq!(g.shape(logits), &[1, 2]);
    assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    assert!((g.value(loss).item() - 0.6931).abs() < 1e-4);
    assert!(matches!(
        classify_loss(&mut g, &p, &[o], &[2]),
        Err(Error::Tensor(TensorError::Input(_)))
    ));

    p.insert("cls.b", Tensor::new(vec![2], vec![-30.0, 30.0]).unwrap());
    let mut g = Graph::<f64>::new();
    let o = row(&mut g, &[0.5, -1.0, 2.0]);
    let (loss, _) = classify_loss(&mut g, &p, &[o], &[1]).unwrap();
    assert!(g.value(loss).item() < 1e-20);
    let logits = class_logits(&mut g, &p, &[o, o]).unwrap();
    assert_eq!(g.shape(logits), &[2, 2]);
}

proptest! {
    #[test]
    fn cosine_scale_invariance_and_symmetry(
        u in prop::collection::vec(-10.0f32..10.0, 1..12),
        seed in any::<u64>(),
        alpha in 0.01f32..100.0,
        beta in 0.01f32..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..u.len()).map(|_| rng.gen_range(-10.0..10.0)).collect();
        prop_assume!(u.iter().any(|&x| x.abs() > 1e-3) && v.iter().any(|&x| x.abs() > 1e-3));
        let mut g = Graph::<f32>::inference();
        let r = |g: &mut Graph<f32>, x: Vec<f32>| g.constant(Tensor::row_vector(x).unwrap());
        let (a, b) = (r(&mut g, u.clone()), r(&mut g, v.clone()));
        let (sa, sb) = (r(&mut g, u.iter().map(|x| x * alpha).collect()), r(&mut g, v.iter().map(|x| x * beta).collect()));
        let c = match_cosine(&mut g, a, b).unwrap().0;
        let cs = match_cosine(&mut g, sa, sb).unwrap().0;
        let swapped = match_cosine(&mut g, b, a).unwrap().0;
        let own = match_cosine(&mut g, a, a).unwrap().0;
        prop_assert!((g.value(c).item() - g.value(cs).item()).abs() <= 1e-6);
        prop_assert_eq!(g.value(c).item(), g.value(swapped).item());
        prop_assert!((g.value(own).item() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn bilinear_identity_is_the_dot_product(u in prop::collection::vec(-1000i32..1000, 1..10), seed in any::<u64>()) {
        let n = u.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1000..1000) as f64).collect();
        let u: Vec<f64> = u.into_iter().map(f64::from).collect();
        let mut g = Graph::inference();
        let (a, b) = (row(&mut g, &u), row(&mut g, &v));
        let eye = g.constant(Tensor::new(vec![n, n], (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()).unwrap());
        let s = match_bilinear(&mut g, a, b, eye).unwrap();
        prop_assert_eq!(g.value(s).item(), u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>());
    }

    #[test]
    fn element_blocks_on_integers(pairs in prop::collection::vec((-50i32..50, -50i32..50), 1..10)) {
        let hs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let ht: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let mut g = Graph::inference();
        let (a, b) = (row(&mut g, &hs), row(&mut g, &ht));
        let f = element_features(&mut g, a, b).unwrap();
        let r = element_features(&mut g, b, a).unwrap();
        let mut expected = hs.clone();
        expected.extend(&ht);
        expected.extend(hs.iter().zip(&ht).map(|(x, y)| x - y));
        expected.extend(hs.iter().zip(&ht).map(|(x, y)| x * y));
        prop_assert_eq!(g.value(f).data(), expected.as_slice());
        let n = hs.len();
        let (fd, rd) = (g.value(f).data(), g.value(r).data());
        for j in 0..n {
            prop_assert_eq!(fd[2 * n + j], -rd[2 * n + j]);
            prop_assert_eq!(fd[3 * n + j], rd[3 * n + j]);
        }
    }
}
