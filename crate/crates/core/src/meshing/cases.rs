//! Marching-cubes case table, derived from face-by-face contour tracing.
//!
//! Corner `i` of a cell sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`. A
//! corner is inside when its value is negative. On each face the contour
//! segments always cut off inside corners in ambiguous configurations, and
//! the decision depends only on that face's four corners, so neighbouring
//! cells agree and the extracted surface is closed.

use std::sync::OnceLock;

/// Corner pairs of the 12 cell edges; the first corner is the lower one.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

pub fn edge_index(a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    EDGES.iter().position(|&e| e == (a, b)).expect("corners share an edge")
}

fn corner_pos(i: usize) -> [f64; 3] {
    [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]
}

fn edge_mid(e: usize) -> [f64; 3] {
    let (a, b) = EDGES[e];
    let (pa, pb) = (corner_pos(a), corner_pos(b));
    [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0, (pa[2] + pb[2]) / 2.0]
}

/// The six faces as (corners in cyclic order, outward normal).
fn faces() -> Vec<([usize; 4], [f64; 3])> {
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |cu: usize, cv: usize| (side << axis) | (cu << u) | (cv << v);
            let ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            let mut n = [0.0; 3];
            n[axis] = if side == 1 { 1.0 } else { -1.0 };
            out.push((ring, n));
        }
    }
    out
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Directed contour segments (edge -> edge) on the cell surface with the
/// inside region on the left, seen from outside the cell.
fn segments(case: usize) -> Vec<(usize, usize)> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut segs = Vec::new();
    for (ring, normal) in faces() {
        let ins: Vec<bool> = ring.iter().map(|&c| inside(c)).collect();
        let n_in = ins.iter().filter(|&&b| b).count();
        // (corner position in ring to cut off, whether that corner is inside)
        let mut cuts: Vec<(usize, Option<usize>)> = Vec::new();
        match n_in {
            1 | 3 => {
                let lone = (0..4).find(|&i| ins[i] == (n_in == 1)).unwrap();
                cuts.push((lone, None));
            }
            2 => {
                if ins[0] == ins[2] {
                    for i in 0..4 {
                        if ins[i] {
                            cuts.push((i, None));
                        }
                    }
                } else {
                    let i = (0..4).find(|&i| ins[i] && ins[(i + 1) % 4]).unwrap();
                    cuts.push((i, Some((i + 1) % 4)));
                }
            }
            _ => {}
        }
        for (i, pair) in cuts {
            let c = ring[i];
            let (ea, eb) = match pair {
                None => (edge_index(ring[(i + 3) % 4], c), edge_index(c, ring[(i + 1) % 4])),
                Some(j) => (edge_index(ring[(i + 3) % 4], c), edge_index(ring[j], ring[(j + 1) % 4])),
            };
            let (a, b) = (edge_mid(ea), edge_mid(eb));
            let side = dot(cross(sub(b, a), sub(corner_pos(c), a)), normal);
            let left_is_inside = (side > 0.0) == inside(c);
            segs.push(if left_is_inside { (ea, eb) } else { (eb, ea) });
        }
    }
    segs
}

/// Triangles (as edge triples) for every corner configuration.
pub fn table() -> &'static Vec<Vec<[usize; 3]>> {
    static T: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    T.get_or_init(|| {
        (0..256)
            .map(|case| {
                let segs = segments(case);
                let mut next = [usize::MAX; 12];
                for &(a, b) in &segs {
                    debug_assert_eq!(next[a], usize::MAX);
                    next[a] = b;
                }
                let mut seen = [false; 12];
                let mut tris = Vec::new();
                for &(start, _) in &segs {
                    if seen[start] {
                        continue;
                    }
                    let mut lp = vec![start];
                    seen[start] = true;
                    let mut e = next[start];
                    while e != start {
                        seen[e] = true;
                        lp.push(e);
                        e = next[e];
                    }
                    // The loop runs counter-clockwise around the inside seen
                    // from outside the cell; reversing the fan makes the
                    // triangle normals point from inside to outside.
                    for k in 1..lp.len() - 1 {
                        tris.push([lp[0], lp[k + 1], lp[k]]);
                    }
                }
                tris
            })
            .collect()
    })
}
