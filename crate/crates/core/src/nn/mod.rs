//! Minimal tape-based neural-network toolkit used by the models.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{AttnLayout, Gradients, Graph, Var};
pub use layers::{grouped_layout, timestep_embedding, AttentionBlock, BlockDims, LayerNorm, Linear, Mlp, Mode};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub mod gradcheck {
    use super::*;

    /// Max relative error between analytic and central-difference gradients of
    /// `f` with respect to each leaf tensor.
    pub fn check(leaves: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var, h: f64) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ls: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let mut worst: f64 = 0.0;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.rows, leaf.cols));
            for i in 0..leaf.data.len() {
                let mut plus = leaves.to_vec();
                plus[li].data[i] += h;
                let mut minus = leaves.to_vec();
                minus[li].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[i];
                let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-6));
                worst = worst.max(err);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = g.shape(x);
        let w = g.input(rand_tensor(&mut rng, r, c));
        let p = g.mul(x, w);
        g.sum_all(p)
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let row = rand_tensor(&mut rng, 1, 2);
        let col = rand_tensor(&mut rng, 3, 1);
        let err = check(
            &[a, b, row, col],
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                let m = g.add_row(m, v[2]);
                let m = g.mul_row(m, v[2]);
                let m = g.mul_col(m, v[3]);
                let t = g.tanh(m);
                let e = g.exp(t);
                let s = g.square(e);
                let s = g.scale(s, 0.7);
                let s = g.add_scalar(s, 2.0);
                let l = g.log(s);
                let p = g.powf(l, 1.5);
                let d = g.sub(p, m);
                weighted_sum(g, d, 9)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reduction_and_indexing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 5, 3);
        let b = rand_tensor(&mut rng, 5, 2);
        let err = check(
            &[a, b],
            |g, v| {
                let c = g.concat_cols(&[v[0], v[1]]);
                let head = g.slice_cols(c, 2, 3);
                let stacked = g.concat_rows(&[v[0], head]);
                let y = weighted_sum(g, stacked, 8);
                let s = g.slice_cols(c, 1, 3);
                let gat = g.gather_rows(s, std::rc::Rc::new(vec![4, 0, 0, 2]));
                let mx = g.segment_max(c, &[0, 1, 0, 2, 1], 4);
                let mr = g.mean_rows(gat);
                let sr = g.sum_rows(mx);
                let x = weighted_sum(g, mr, 3);
                let z = weighted_sum(g, sr, 4);
                let xy = g.add(x, y);
                g.add(xy, z)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 4, 6);
        let gamma = rand_tensor(&mut rng, 1, 6);
        let beta = rand_tensor(&mut rng, 1, 6);
        let err = check(
            &[x, gamma, beta],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
                weighted_sum(g, y, 5)
            },
            1e-6,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn attention_gradients_with_groups_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(&mut rng, 5, 4);
        let k = rand_tensor(&mut rng, 6, 4);
        let v = rand_tensor(&mut rng, 6, 4);
        let layout = grouped_layout(2, vec![0, 1, 1, 0, 1], 2, 3, vec![true, false, true, true, true, true]);
        let err = check(
            &[q, k, v],
            |g, vs| {
                let o = g.attention(vs[0], vs[1], vs[2], layout.clone());
                weighted_sum(g, o, 6)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn attention_ignores_masked_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, 2, 4);
        let k = rand_tensor(&mut rng, 3, 4);
        let v = rand_tensor(&mut rng, 3, 4);
        let mut v2 = v.clone();
        v2.row_mut(1).iter_mut().for_each(|x| *x = 100.0);
        let layout = grouped_layout(2, vec![0, 0], 1, 3, vec![true, false, true]);
        let run = |v: Tensor| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v));
            let o = g.attention(qv, kv, vv, layout.clone());
            g.value(o).clone()
        };
        assert_eq!(run(v), run(v2));
    }

    #[test]
    fn segment_max_ties_and_empty_segments() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0], vec![0.5]]));
        let m = g.segment_max(x, &[0, 0, 0], 2);
        assert_eq!(g.value(m).data, vec![1.0, 0.0]);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.9, 0.999, Some(10.0));
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let s = g.square(x);
            let l = g.sum_all(s);
            let grads = g.backward(l);
            opt.step(&mut store, &grads, &[id], 0.01);
        }
        assert!(store.get(id).data.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn timestep_embedding_is_bounded() {
        let e = timestep_embedding(37, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|x| x.abs() <= 1.0));
        assert_ne!(timestep_embedding(1, 16), timestep_embedding(2, 16));
    }
}
