//! Composite Gauss-Legendre rules on intervals with forced breakpoints.

use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;

pub const PANEL_ORDER: usize = 16;

fn panel_rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let rule = GaussLegendre::new(NonZeroUsize::new(PANEL_ORDER).unwrap());
        rule.as_node_weight_pairs().to_vec()
    })
}

/// Nodes and weights of a composite rule on `[lo, hi]`.
///
/// Panel edges always include every breakpoint inside the interval, and no
/// panel is wider than `max_width`. `min_nodes` bounds the total node count from
/// below (rounded up to a multiple of the panel order).
pub fn composite_rule(
    lo: f64,
    hi: f64,
    breakpoints: &[f64],
    min_nodes: usize,
    max_width: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut edges: Vec<f64> = vec![lo, hi];
    edges.extend(breakpoints.iter().copied().filter(|b| *b > lo && *b < hi));
    edges.sort_by(f64::total_cmp);
    edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + b.abs()));

    let min_panels = min_nodes.div_ceil(PANEL_ORDER).max(1);
    let span = hi - lo;
    let rule = panel_rule();
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let by_share = ((b - a) / span * min_panels as f64).ceil() as usize;
        let by_width = ((b - a) / max_width).ceil() as usize;
        let panels = by_share.max(by_width).max(1);
        let h = (b - a) / panels as f64;
        for p in 0..panels {
            let pa = a + h * p as f64;
            let half = 0.5 * h;
            let mid = pa + half;
            for &(x, wt) in rule {
                nodes.push(mid + half * x);
                weights.push(half * wt);
            }
        }
    }
    (nodes, weights)
}
