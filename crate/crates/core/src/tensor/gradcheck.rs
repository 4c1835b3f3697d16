use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, ParamVars, Result, Var};

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` builds a scalar loss from the registered parameters. Up to
/// `coords_per_param` coordinates of each parameter are checked (all of them
/// when the parameter is smaller). Returns the largest
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(params: &ParamStore<f64>, eps: f64, coords_per_param: usize, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = params.register(&mut graph, true);
    let loss = f(&mut graph, &vars)?;
    let mut grads = graph.backward(loss)?;
    let analytic = vars.collect(&graph, &mut grads);

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = p.register(&mut g, false);
        let l = f(&mut g, &v)?;
        Ok(g.scalar(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for (name, g_ad) in names.iter().zip(&analytic) {
        let n = g_ad.len();
        let coords: Vec<usize> = if n <= coords_per_param { (0..n).collect() } else { sample(&mut rng, n, coords_per_param).into_vec() };
        for i in coords {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (g_ad[i] - fd).abs() / (g_ad[i].abs() + fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
