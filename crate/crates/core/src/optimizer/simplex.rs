/// Euclidean projection of `v` onto the probability simplex, in place.
pub fn project_simplex_in_place(v: &mut [f64]) {
    let k = v.len();
    if k == 0 {
        return;
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    project_simplex_in_place(&mut out);
    out
}

/// Projection onto the simplex in the metric `sum d_j (y_j - v_j)^2`:
/// `y_j = max(0, v_j - t / d_j)` with `t` fixed by the unit sum. `d` must
/// be strictly positive.
pub fn project_simplex_scaled(v: &mut [f64], d: &[f64], order: &mut Vec<usize>) {
    debug_assert_eq!(v.len(), d.len());
    if v.is_empty() {
        return;
    }
    // y_j > 0 iff t < v_j d_j; add coordinates by descending breakpoint
    order.clear();
    order.extend(0..v.len());
    order.sort_by(|&a, &b| (v[b] * d[b]).total_cmp(&(v[a] * d[a])));
    let mut sv = 0.0;
    let mut sw = 0.0;
    let mut theta = 0.0;
    for &j in order.iter() {
        let w = 1.0 / d[j];
        sv += v[j];
        sw += w;
        let t = (sv - 1.0) / sw;
        if v[j] - t * w > 0.0 {
            theta = t;
        }
    }
    for (x, &dj) in v.iter_mut().zip(d) {
        *x = (*x - theta / dj).max(0.0);
    }
    // v_j and theta / d_j can be large and nearly cancel when d spans many
    // orders of magnitude; push the leftover sum error back onto the support
    // in the same metric
    for _ in 0..4 {
        let err = v.iter().sum::<f64>() - 1.0;
        if err.abs() <= 4.0 * f64::EPSILON * v.len() as f64 {
            break;
        }
        let sw: f64 = v.iter().zip(d).filter(|(x, _)| **x > 0.0).map(|(_, dj)| 1.0 / dj).sum();
        if !(sw > 0.0) {
            break;
        }
        for (x, &dj) in v.iter_mut().zip(d) {
            if *x > 0.0 {
                *x = (*x - err / (dj * sw)).max(0.0);
            }
        }
    }
}
