//! Box-constrained Nelder–Mead.
//!
//! Points leaving the box are clamped back onto it. Clamping can flatten the
//! simplex against a face, so a converged search is restarted from its best
//! point with a fresh simplex until a restart no longer moves. The search
//! stops then or after `max_iter` iterations in total.

#[derive(Clone, Copy, Debug)]
pub struct NelderMeadOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial edge length as a fraction of each box width.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { tol: 1e-8, max_iter: 500, initial_step: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Number of objective evaluations.
    pub probes: usize,
}

/// Minimise `f` over the box `lo <= x <= hi` starting at `x0`.
///
/// `f` may fail; the first failure aborts the search.
pub fn nelder_mead<E>(
    mut f: impl FnMut(&[f64]) -> Result<f64, E>,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: NelderMeadOptions,
) -> Result<NelderMeadResult, E> {
    let mut probes = 0usize;
    let mut eval = |x: &[f64], probes: &mut usize| -> Result<f64, E> {
        *probes += 1;
        f(x)
    };
    let mut iterations = 0;
    let (mut x, mut value) = (x0.to_vec(), eval(x0, &mut probes)?);
    loop {
        let (nx, nv, done) = simplex_run(&mut eval, &mut probes, &x, value, lo, hi, opts, &mut iterations)?;
        let moved = nx.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        x = nx;
        value = nv;
        if !done {
            return Ok(NelderMeadResult { x, value, iterations, converged: false, probes });
        }
        if moved < opts.tol {
            return Ok(NelderMeadResult { x, value, iterations, converged: true, probes });
        }
    }
}

/// One Nelder–Mead search from `start`; `true` when the simplex collapsed
/// below `tol` before the shared iteration budget ran out.
#[allow(clippy::too_many_arguments)]
fn simplex_run<E>(
    eval: &mut impl FnMut(&[f64], &mut usize) -> Result<f64, E>,
    probes: &mut usize,
    start: &[f64],
    start_value: f64,
    lo: &[f64],
    hi: &[f64],
    opts: NelderMeadOptions,
    iterations: &mut usize,
) -> Result<(Vec<f64>, f64, bool), E> {
    let dim = start.len();
    let clamp = |x: &mut Vec<f64>| {
        for j in 0..dim {
            x[j] = x[j].clamp(lo[j], hi[j]);
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.to_vec(), start_value));
    for j in 0..dim {
        let step = opts.initial_step * (hi[j] - lo[j]);
        let mut p = start.to_vec();
        // step towards the interior when the start sits on the upper face
        p[j] = if p[j] + step <= hi[j] { p[j] + step } else { p[j] - step };
        clamp(&mut p);
        let v = eval(&p, probes)?;
        simplex.push((p, v));
    }

    let mut converged = false;
    while *iterations < opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if diameter(&simplex) < opts.tol {
            converged = true;
            break;
        }
        *iterations += 1;

        let worst = simplex[dim].clone();
        let mut centroid = vec![0.0; dim];
        for (p, _) in &simplex[..dim] {
            for j in 0..dim {
                centroid[j] += p[j] / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..dim).map(|j| centroid[j] + t * (worst.0[j] - centroid[j])).collect();
            clamp(&mut p);
            p
        };

        let reflected = along(-1.0);
        let fr = eval(&reflected, probes)?;
        if fr < simplex[0].1 {
            let expanded = along(-2.0);
            let fe = eval(&expanded, probes)?;
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
            continue;
        }
        let (contracted, fc) = if fr < worst.1 {
            let p = along(-0.5);
            let v = eval(&p, probes)?;
            (p, v)
        } else {
            let p = along(0.5);
            let v = eval(&p, probes)?;
            (p, v)
        };
        if fc < worst.1.min(fr) {
            simplex[dim] = (contracted, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let mut p: Vec<f64> = (0..dim).map(|j| best[j] + 0.5 * (entry.0[j] - best[j])).collect();
            clamp(&mut p);
            let v = eval(&p, probes)?;
            *entry = (p, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Ok((x, value, converged))
}

fn diameter(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let mut d = 0.0f64;
    for a in simplex {
        for b in simplex {
            let dist = a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            d = d.max(dist);
        }
    }
    d
}
