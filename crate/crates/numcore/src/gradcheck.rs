use crate::{Error, Graph, Result, Tensor, Var};

/// Step used by the central-difference oracle.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input, chosen
    /// deterministically from `seed`. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Largest relative discrepancy between the tape gradient of a scalar
/// function and central differences, over every coordinate of `x`:
/// `max |analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        &GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

/// Multi-input form of [`grad_check`].
pub fn grad_check_many<F>(f: F, xs: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Contract(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(grads);
    drop(g);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for i in coordinates(x.numel(), opts, which as u64) {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + opts.eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - opts.eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[which][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn coordinates(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(m) if m < n => {
            let mut state = opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut picked: Vec<usize> = (0..m).map(|_| (splitmix(&mut state) % n as u64) as usize).collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        }
        _ => (0..n).collect(),
    }
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
