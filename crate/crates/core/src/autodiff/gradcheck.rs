use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::params::ParamStore;
use crate::error::Result;

/// Compare analytic gradients against central finite differences.
///
/// `builder` must deterministically construct a scalar-rooted graph from
/// the store. Returns the maximum over all parameter components of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(builder: F, store: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = builder(&mut g, s)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let root = builder(&mut g, store)?;
    let grads = g.backward(root)?;

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut max_rel: f64 = 0.0;
    let mut work = store.clone();
    for name in &names {
        let len = store.value(name).expect("known name").len();
        for idx in 0..len {
            let base = store.value(name).expect("known name").data()[idx];
            work.apply(name, |t| t.data_mut()[idx] = base + step)?;
            let up = eval(&work)?;
            work.apply(name, |t| t.data_mut()[idx] = base - step)?;
            let down = eval(&work)?;
            work.apply(name, |t| t.data_mut()[idx] = base)?;

            let fd = (up - down) / (2.0 * step);
            let analytic = grads.get(name).map_or(0.0, |t| t.data()[idx]);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max((analytic - fd).abs() / denom);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_model_loss_tight() {
        // loss = sum(square(W x + b - y))
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(2, 3, vec![0.3, -0.1, 0.7, 0.2, 0.5, -0.4]).unwrap())
            .unwrap();
        store.insert("b", Tensor::vector(vec![0.1, -0.2])).unwrap();
        let builder = |g: &mut Graph, s: &ParamStore| {
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let x = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
            let y = g.constant(Tensor::vector(vec![0.4, -0.3]));
            let wx = g.matmul(w, x)?;
            let pred = g.add(wx, b)?;
            let resid = g.sub(pred, y)?;
            let sq = g.square(resid)?;
            g.sum(sq)
        };
        let err = grad_check(builder, &store, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn constant_graph_passes() {
        let mut store = ParamStore::new();
        store.insert("unused", Tensor::vector(vec![1.0])).unwrap();
        let builder = |g: &mut Graph, _s: &ParamStore| {
            let c = g.constant(Tensor::scalar(3.5));
            let sq = g.square(c)?;
            g.sum(sq)
        };
        let err = grad_check(builder, &store, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![-2.0])).unwrap();
        let builder = |g: &mut Graph, s: &ParamStore| {
            let w = g.param(s, "w")?;
            let lw = g.log(w)?; // log of negative -> non-finite
            g.sum(lw)
        };
        assert!(grad_check(builder, &store, 1e-5).is_err());
    }

    #[test]
    fn every_op_matches_fd_on_100_seeds() {
        // One graph exercising every supported op kind, rebuilt per seed.
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let rand_vec =
                |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-0.9..0.9)).collect()
                };
            store
                .insert("w", Tensor::new(2, 4, rand_vec(&mut rng, 8)).unwrap())
                .unwrap();
            store
                .insert("v", Tensor::vector(rand_vec(&mut rng, 4)))
                .unwrap();
            store
                .insert("u", Tensor::vector(rand_vec(&mut rng, 2)))
                .unwrap();
            let x = rand_vec(&mut rng, 2);

            let builder = move |g: &mut Graph, s: &ParamStore| {
                let w = g.param(s, "w")?;
                let v = g.param(s, "v")?;
                let u = g.param(s, "u")?;
                let xc = g.constant(Tensor::vector(x.clone()));
                let wv = g.matmul(w, v)?; // matmul
                let t = g.tanh(wv)?; // tanh
                let sg = g.sigmoid(wv)?; // sigmoid
                let sp = g.softplus(t)?; // softplus (positive output)
                let lg = g.log(sp)?; // log of positive
                let ex = g.exp(t)?; // exp
                let hd = g.hadamard(sg, ex)?; // hadamard
                let ad = g.add(hd, lg)?; // add
                let sb = g.sub(ad, u)?; // sub
                let sc = g.scale(sb, -0.7)?; // scale
                let cc = g.concat(sc, xc)?; // concat
                let sl = g.slice(cc, 1, 2)?; // slice
                let sq = g.square(sl)?; // square
                g.sum(sq) // sum
            };
            let err = grad_check(builder, &store, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }
}
