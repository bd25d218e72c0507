//! OPTICS ordering with a reachability-cut cluster extraction.

/// One entry of the OPTICS ordering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reachability {
    pub index: usize,
    /// `f64::INFINITY` when undefined.
    pub reachability: f64,
    pub core_distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpticsParams {
    /// `minPts`; the point itself counts toward its neighbourhood.
    pub min_points: usize,
    /// Generating radius `eps`.
    pub max_radius: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Computes the OPTICS ordering of `points`.
pub fn optics_ordering(points: &[[f64; 2]], params: OpticsParams) -> Vec<Reachability> {
    let n = points.len();
    let eps = params.max_radius;
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = points
                .iter()
                .map(|&q| dist(points[i], q))
                .filter(|&d| d <= eps)
                .collect();
            if d.len() < params.min_points || params.min_points == 0 {
                return f64::INFINITY;
            }
            d.sort_by(f64::total_cmp);
            d[params.min_points - 1]
        })
        .collect();

    let mut reach = vec![f64::INFINITY; n];
    let mut processed = vec![false; n];
    let mut in_seeds = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let expand = |p: usize, reach: &mut Vec<f64>, in_seeds: &mut Vec<bool>, processed: &[bool]| {
        if !core[p].is_finite() {
            return;
        }
        for q in 0..n {
            if processed[q] {
                continue;
            }
            let d = dist(points[p], points[q]);
            if d > eps {
                continue;
            }
            let r = core[p].max(d);
            if r < reach[q] {
                reach[q] = r;
            }
            in_seeds[q] = true;
        }
    };

    for start in 0..n {
        if processed[start] {
            continue;
        }
        processed[start] = true;
        order.push(Reachability {
            index: start,
            reachability: reach[start],
            core_distance: core[start],
        });
        expand(start, &mut reach, &mut in_seeds, &processed);
        loop {
            // smallest reachability among seeds, lowest index on ties
            let next = (0..n)
                .filter(|&q| in_seeds[q] && !processed[q])
                .min_by(|&a, &b| reach[a].total_cmp(&reach[b]).then(a.cmp(&b)));
            let Some(q) = next else { break };
            processed[q] = true;
            in_seeds[q] = false;
            order.push(Reachability {
                index: q,
                reachability: reach[q],
                core_distance: core[q],
            });
            expand(q, &mut reach, &mut in_seeds, &processed);
        }
    }
    order
}

/// Cuts the reachability plot at `cut`: returns per-point labels (`None` = noise).
pub fn extract_cut(order: &[Reachability], n: usize, cut: f64) -> Vec<Option<usize>> {
    let mut labels = vec![None; n];
    let mut current: Option<usize> = None;
    let mut next_id = 0;
    for r in order {
        if r.reachability > cut {
            if r.core_distance <= cut {
                current = Some(next_id);
                next_id += 1;
                labels[r.index] = current;
            } else {
                current = None;
            }
        } else {
            labels[r.index] = current;
        }
    }
    labels
}

/// Full pipeline: ordering, cut at `cluster_threshold * max_radius`, removal of
/// clusters with fewer than `min_cluster` members. Clusters are returned as
/// point-index lists ordered by their first position in the OPTICS ordering.
pub fn cluster_points(
    points: &[[f64; 2]],
    min_cluster: usize,
    max_radius: f64,
    cluster_threshold: f64,
) -> Vec<Vec<usize>> {
    if points.len() < min_cluster {
        return Vec::new();
    }
    let order = optics_ordering(
        points,
        OpticsParams {
            min_points: min_cluster,
            max_radius,
        },
    );
    let labels = extract_cut(&order, points.len(), cluster_threshold * max_radius);
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot: Vec<Option<usize>> = Vec::new();
    for r in &order {
        if let Some(label) = labels[r.index] {
            if slot.len() <= label {
                slot.resize(label + 1, None);
            }
            let k = *slot[label].get_or_insert_with(|| {
                clusters.push(Vec::new());
                clusters.len() - 1
            });
            clusters[k].push(r.index);
        }
    }
    clusters.retain(|c| c.len() >= min_cluster);
    clusters
}
