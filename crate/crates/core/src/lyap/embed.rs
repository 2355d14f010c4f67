use super::LyapError;

/// Delay vectors `(x_k, x_{k+lag}, ..., x_{k+(dim-1)lag})`, one per start index.
pub fn delay_embed(series: &[f64], dim: usize, lag: usize) -> Result<Vec<Vec<f64>>, LyapError> {
    if dim == 0 || lag == 0 {
        return Err(LyapError::InvalidParams(format!(
            "embedding needs dim >= 1 and lag >= 1, got dim={dim} lag={lag}"
        )));
    }
    let span = (dim - 1) * lag + 1;
    if series.len() < span {
        return Err(LyapError::SeriesTooShort {
            len: series.len(),
            needed: span,
        });
    }
    Ok((0..=series.len() - span)
        .map(|k| (0..dim).map(|c| series[k + c * lag]).collect())
        .collect())
}

pub fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Neighbourhood of one reference point on the orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitIndexSet {
    pub reference: usize,
    /// Ascending orbit indices.
    pub neighbors: Vec<usize>,
    pub radius: f64,
}

/// Neighbours of orbit point `i` under the Chebyshev distance.
///
/// Candidates are indices `j` with `valid(j)`, `j != i` and `|i - j| > min_tsep`.
/// The radius is the `min_nb`-th smallest candidate distance, and every
/// candidate within `radius + tie_tol` is kept, so ties at the radius are
/// all included.
pub fn find_neighbors<F>(
    orbit: &[Vec<f64>],
    i: usize,
    min_nb: usize,
    min_tsep: usize,
    tie_tol: f64,
    valid: F,
) -> Result<OrbitIndexSet, LyapError>
where
    F: Fn(usize) -> bool,
{
    let reference = &orbit[i];
    let candidates: Vec<(usize, f64)> = orbit
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i && i.abs_diff(j) > min_tsep && valid(j))
        .map(|(j, v)| (j, chebyshev(reference, v)))
        .collect();
    if min_nb == 0 || candidates.len() < min_nb {
        return Err(LyapError::NotEnoughNeighbors {
            index: i,
            found: candidates.len(),
            needed: min_nb,
        });
    }
    let mut dists: Vec<f64> = candidates.iter().map(|&(_, d)| d).collect();
    let (_, &mut radius, _) = dists.select_nth_unstable_by(min_nb - 1, f64::total_cmp);
    let cutoff = radius + tie_tol;
    let neighbors = candidates
        .iter()
        .filter(|&&(_, d)| d <= cutoff)
        .map(|&(j, _)| j)
        .collect();
    Ok(OrbitIndexSet {
        reference: i,
        neighbors,
        radius,
    })
}
