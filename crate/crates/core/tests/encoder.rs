use headwise::autodiff::gradcheck::finite_diff_check;
use headwise::autodiff::{Graph, Real, Tensor, Var};
use headwise::data::{CLS_ID, PAD_ID};
use headwise::encoder::{
    attention_head, embed, encode, encode_vars, multi_head_layer, EncoderConfig,
};
use headwise::params::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type NoRng = ChaCha8Rng;

fn config(layers: usize, heads: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        num_heads: heads,
        head_dim: d,
        ffn_dim: 2 * heads * d,
        max_seq_len: 12,
        vocab_size: 30,
        dropout_rate: 0.0,
    }
}

fn params<T: Real>(c: &EncoderConfig, seed: u64) -> ParamStore<T> {
    let mut p = ParamStore::new();
    c.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
    p
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    std::iter::once(CLS_ID)
        .chain((1..len).map(|_| rng.gen_range(3..vocab as u32)))
        .collect()
}

fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn shapes_hold_across_the_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [1, 2, 4] {
        for heads in [1, 2, 4, 8] {
            for d in [8, 16] {
                let c = config(k, heads, d);
                let p = params::<f32>(&c, 5);
                let tokens = random_tokens(&mut rng, 6, c.vocab_size);
                let out = encode(&c, &p, &tokens).unwrap();
                assert_eq!(
                    (out.num_layers(), out.num_heads(), out.head_dim()),
                    (k, heads, d)
                );
                for l in 0..k {
                    assert_eq!(out.head_vectors[l].len(), heads);
                    assert!(out.head_vectors[l].iter().all(|v| v.len() == d));
                    assert_eq!(out.cls_vectors[l].len(), heads * d);
                    assert_eq!(out.attention[l].len(), heads);
                    assert!(out.attention[l].iter().all(|a| a.shape() == [6, 6]));
                }
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one_over_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config(rng.gen_range(1..3), rng.gen_range(1..4), 8);
        let len = rng.gen_range(2..=c.max_seq_len);
        let mut tokens = random_tokens(&mut rng, len, c.vocab_size);
        for t in tokens.iter_mut().skip(1) {
            if rng.gen_bool(0.2) {
                *t = PAD_ID;
            }
        }
        let p32 = params::<f32>(&c, seed);
        for layer in encode(&c, &p32, &tokens).unwrap().attention {
            for a in layer {
                for r in 0..a.rows() {
                    assert!(
                        (a.row(r).iter().sum::<f32>() - 1.0).abs() <= 1e-5,
                        "seed {seed}"
                    );
                }
            }
        }
        let p64 = params::<f64>(&c, seed);
        for layer in encode(&c, &p64, &tokens).unwrap().attention {
            for a in layer {
                for r in 0..a.rows() {
                    assert!(
                        (a.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9,
                        "seed {seed}"
                    );
                }
            }
        }
    }
}

#[test]
fn masking_all_but_one_column_gives_one_hot_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::<f64>::inference();
    let rand_t = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let h = g.constant(rand_t(&mut rng, 5, 6));
    let wq = g.constant(rand_t(&mut rng, 6, 3));
    let wk = g.constant(rand_t(&mut rng, 6, 3));
    let wv = g.constant(rand_t(&mut rng, 6, 3));
    for j in 0..5 {
        let mask: Vec<bool> = (0..5).map(|i| i == j).collect();
        let (head, w) =
            attention_head::<f64, NoRng>(&mut g, h, wq, wk, wv, &mask, &mut None).unwrap();
        for r in 0..5 {
            let expected: Vec<f64> = (0..5).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            assert_eq!(g.value(w).row(r), expected.as_slice());
        }
        // Every query then reads value row j.
        let v = g.matmul(h, wv).unwrap();
        let vj = g.value(v).row(j).to_vec();
        for r in 0..5 {
            assert!(max_abs_diff(g.value(head).row(r), &vj) < 1e-12);
        }
    }
    assert!(attention_head::<f64, NoRng>(&mut g, h, wq, wk, wv, &[true; 4], &mut None).is_err());
}

#[test]
fn head_vectors_are_row_zero_of_each_head() {
    let c = config(2, 3, 8);
    let p = params::<f64>(&c, 13);
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(1), 7, c.vocab_size);
    let out = encode(&c, &p, &tokens).unwrap();

    let mut g = Graph::inference();
    let emb = embed(&mut g, &c, &p, &tokens).unwrap();
    let mask = vec![true; tokens.len()];
    let mut h = emb.hidden;
    for l in 0..c.num_layers {
        let layer = multi_head_layer::<f64, NoRng>(&mut g, &c, &p, l, h, &mask, &mut None).unwrap();
        assert_eq!(g.shape(layer.output), g.shape(h));
        for (i, &head) in layer.heads.iter().enumerate() {
            assert_eq!(g.value(head).row(0), out.head_vectors[l][i].as_slice());
        }
        assert_eq!(g.value(layer.output).row(0), out.cls_vectors[l].as_slice());
        h = layer.output;
    }
}

#[test]
fn output_map_of_captured_heads_reproduces_the_projection() {
    let c = config(3, 4, 8);
    let p = params::<f64>(&c, 21);
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(2), 9, c.vocab_size);
    let mut g = Graph::inference();
    let vars = encode_vars::<f64, NoRng>(&mut g, &c, &p, &tokens, None).unwrap();
    let out = vars.to_output(&g);
    let hd = c.hidden_dim();
    for l in 0..c.num_layers {
        let concat: Vec<f64> = out.head_vectors[l].concat();
        let w = p.get(&format!("enc.l{l}.out.w")).unwrap();
        let b = p.get(&format!("enc.l{l}.out.b")).unwrap();
        let recomputed: Vec<f64> = (0..hd)
            .map(|j| {
                b.data()[j]
                    + (0..hd)
                        .map(|i| concat[i] * w.data()[i * hd + j])
                        .sum::<f64>()
            })
            .collect();
        let projected = g.value(vars.projected[l]).row(0);
        assert!(max_abs_diff(&recomputed, projected) < 1e-12, "layer {l}");
    }
}

#[test]
fn inference_is_deterministic() {
    let c = config(2, 2, 8);
    let p = params::<f32>(&c, 4);
    let tokens = [CLS_ID, 5, 9, 11];
    assert_eq!(
        encode(&c, &p, &tokens).unwrap(),
        encode(&c, &p, &tokens).unwrap()
    );
    let mut g = Graph::<f32>::inference();
    let a = embed(&mut g, &c, &p, &tokens).unwrap();
    let b = embed(&mut g, &c, &p, &tokens).unwrap();
    assert_eq!(g.value(a.hidden), g.value(b.hidden));
}

fn check_padding_invariance<T: Real>(
    c: &EncoderConfig,
    seed: u64,
    len: usize,
    pads: usize,
    tol: f64,
) {
    let p = params::<T>(c, seed);
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(seed ^ 99), len, c.vocab_size);
    let mut padded = tokens.clone();
    padded.extend(std::iter::repeat_n(PAD_ID, pads));
    let plain = encode(c, &p, &tokens).unwrap();
    let with_pad = encode(c, &p, &padded).unwrap();
    for l in 0..c.num_layers {
        for i in 0..c.num_heads {
            assert!(max_abs_diff(&plain.head_vectors[l][i], &with_pad.head_vectors[l][i]) <= tol);
        }
        assert!(max_abs_diff(&plain.cls_vectors[l], &with_pad.cls_vectors[l]) <= tol);
        for a in &with_pad.attention[l] {
            assert!(a.row(0)[len..].iter().all(|&w| w == T::zero()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn padding_leaves_position_zero_unchanged(seed in any::<u64>(), len in 2usize..7, pads in 1usize..6, heads in 1usize..4) {
        let c = config(2, heads, 8);
        check_padding_invariance::<f32>(&c, seed, len, pads, 1e-5);
        check_padding_invariance::<f64>(&c, seed, len, pads, 1e-12);
    }
}

#[test]
fn scalar_of_encoder_output_passes_gradient_check() {
    let c = config(2, 2, 8);
    let mut p = params::<f64>(&c, 31);
    // Move layer-norm gains and biases off their initial constants.
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for name in names {
        for v in p.get_mut(&name).unwrap().data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let tokens = [CLS_ID, 4, 7, PAD_ID, 12];
    let weights: Vec<f64> = (0..c.hidden_dim() + c.head_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> headwise::Result<Var> {
        let vars = encode_vars::<f64, NoRng>(g, &c, p, &tokens, None)?;
        let joined = g.concat_last(&[vars.cls_vectors[1], vars.head_vectors[0][1]])?;
        let w = g.constant(Tensor::row_vector(weights.clone())?);
        let y = g.mul(joined, w)?;
        Ok(g.sum_all(y)?)
    };
    let report = finite_diff_check(loss, &p, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "worst {:?}", report.worst());
}
