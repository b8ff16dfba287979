//! Two-objective hypervolume (both objectives minimized).

/// Exact area dominated by `points` and bounded by `reference`. Points not
/// strictly better than the reference in both coordinates contribute nothing.
pub fn hypervolume_2d(points: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> = points
        .iter()
        .copied()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1])
        .collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    sweep(&pts, reference)
}

/// Staircase sweep over points sorted by the first coordinate.
fn sweep(sorted: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut area = 0.0;
    let mut floor = reference[1];
    for p in sorted {
        if p[1] < floor {
            area += (reference[0] - p[0]) * (floor - p[1]);
            floor = p[1];
        }
    }
    area
}

/// Indices of the nondominated points (minimization), first occurrence of
/// duplicates kept, sorted by the first coordinate.
pub fn nondominated(points: &[[f64; 2]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a][0]
            .total_cmp(&points[b][0])
            .then(points[a][1].total_cmp(&points[b][1]))
            .then(a.cmp(&b))
    });
    let mut out = Vec::new();
    let mut best = f64::INFINITY;
    for i in order {
        if points[i][1] < best {
            out.push(i);
            best = points[i][1];
        }
    }
    out
}

/// A frontier prepared for repeated improvement queries.
#[derive(Debug, Clone)]
pub struct Staircase {
    sorted: Vec<[f64; 2]>,
    reference: [f64; 2],
    pub volume: f64,
}

impl Staircase {
    pub fn new(points: &[[f64; 2]], reference: [f64; 2]) -> Self {
        let mut sorted: Vec<[f64; 2]> = points
            .iter()
            .copied()
            .filter(|p| p[0] < reference[0] && p[1] < reference[1])
            .collect();
        sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        let volume = sweep(&sorted, reference);
        Staircase {
            sorted,
            reference,
            volume,
        }
    }

    /// Hypervolume gained by adding `x`.
    pub fn improvement(&self, x: [f64; 2]) -> f64 {
        let r = self.reference;
        if x[0] >= r[0] || x[1] >= r[1] {
            return 0.0;
        }
        let own = (r[0] - x[0]) * (r[1] - x[1]);
        // the frontier's dominated region inside x's box is the staircase
        // of the points clipped to the box corner; clipping keeps the order
        let mut covered = 0.0;
        let mut floor = r[1];
        for p in &self.sorted {
            let q = [p[0].max(x[0]), p[1].max(x[1])];
            if q[1] < floor {
                covered += (r[0] - q[0]) * (floor - q[1]);
                floor = q[1];
            }
        }
        (own - covered).max(0.0)
    }
}
