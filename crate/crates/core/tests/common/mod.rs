//! Independent reference implementations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use busvar::boost::{BoostedModel, Node, Tree};
use busvar::ingest::{StopRegistry, Transaction, Trip};
use busvar::Point;
use chrono::NaiveDate;
use rand::Rng;

pub fn date(day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 6, day).unwrap()
}

/// A trip with the given coordinates (metres) and times (seconds).
pub fn trip(o: (f64, f64), d: (f64, f64), start_s: u32, end_s: u32) -> Trip {
    Trip {
        card_id: "c".into(),
        date: date(1),
        origin_stop: format!("{}:{}", o.0, o.1),
        destination_stop: format!("{}:{}", d.0, d.1),
        origin: Point::new(o.0, o.1),
        destination: Point::new(d.0, d.1),
        start_s,
        end_s,
        leg_count: 1,
    }
}

pub fn random_trips<R: Rng>(rng: &mut R, n: usize) -> Vec<Trip> {
    (0..n)
        .map(|_| {
            let start = rng.gen_range(7 * 3600..9 * 3600);
            trip(
                (rng.gen_range(0.0..20_000.0), rng.gen_range(0.0..12_000.0)),
                (rng.gen_range(0.0..20_000.0), rng.gen_range(0.0..12_000.0)),
                start,
                start + rng.gen_range(60..7200),
            )
        })
        .collect()
}

/// Mean over every ordered pair `i != j`, which equals the mean over
/// unordered pairs.
fn ordered_pair_mean(n: usize, d: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += d(i, j);
            }
        }
    }
    total / (n * (n - 1)) as f64
}

pub fn oracle_sv(trips: &[Trip]) -> f64 {
    ordered_pair_mean(trips.len(), |i, j| {
        let (a, b) = (&trips[i], &trips[j]);
        let v = [
            a.origin.x - b.origin.x,
            a.origin.y - b.origin.y,
            a.destination.x - b.destination.x,
            a.destination.y - b.destination.y,
        ];
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    })
}

pub fn oracle_tv(trips: &[Trip]) -> f64 {
    ordered_pair_mean(trips.len(), |i, j| {
        let (a, b) = (&trips[i], &trips[j]);
        let ds = (f64::from(a.start_s) - f64::from(b.start_s)) / 3600.0;
        let de = (f64::from(a.end_s) - f64::from(b.end_s)) / 3600.0;
        (ds * ds + de * de).sqrt()
    })
}

/// Moran's I from a materialised weight matrix.
#[allow(clippy::needless_range_loop)]
pub fn dense_morans_i(locations: &[Point], values: &[f64]) -> f64 {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let (dx, dy) = (locations[i].x - locations[j].x, locations[i].y - locations[j].y);
                w[i][j] = 1.0 / (dx * dx + dy * dy).sqrt();
            }
        }
    }
    let s0: f64 = w.iter().flatten().sum();
    let mut num = 0.0;
    for i in 0..n {
        for j in 0..n {
            num += w[i][j] * (values[i] - mean) * (values[j] - mean);
        }
    }
    let den: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    n as f64 / s0 * num / den
}

/// Square lattice of `side * side` points spaced 1 apart.
pub fn lattice(side: usize) -> Vec<Point> {
    (0..side * side)
        .map(|k| Point::new((k % side) as f64, (k / side) as f64))
        .collect()
}

pub fn checkerboard(side: usize) -> Vec<f64> {
    (0..side * side)
        .map(|k| if (k % side + k / side).is_multiple_of(2) { 1.0 } else { 0.0 })
        .collect()
}

/// Left half 1, right half 0.
pub fn blocks(side: usize) -> Vec<f64> {
    (0..side * side)
        .map(|k| if k % side < side / 2 { 1.0 } else { 0.0 })
        .collect()
}

/// Cover-weighted expectation of a tree given the features in `present`.
pub fn expectation(tree: &Tree, at: usize, row: &[f64], present: &[bool]) -> f64 {
    match &tree.nodes[at] {
        Node::Leaf { value, .. } => *value,
        Node::Split {
            feature,
            threshold,
            default_left,
            left,
            right,
            cover,
        } => {
            if present[*feature] {
                let x = row[*feature];
                let go_left = if x.is_nan() { *default_left } else { x < *threshold };
                expectation(tree, if go_left { *left } else { *right }, row, present)
            } else {
                let (cl, cr) = (tree.nodes[*left].cover(), tree.nodes[*right].cover());
                (cl * expectation(tree, *left, row, present) + cr * expectation(tree, *right, row, present)) / cover
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values of the ensemble by enumerating all feature subsets.
pub fn brute_shapley(model: &BoostedModel, row: &[f64]) -> Vec<f64> {
    let m = model.n_features;
    let value = |mask: usize| -> f64 {
        let present: Vec<bool> = (0..m).map(|j| mask & (1 << j) != 0).collect();
        model.trees.iter().map(|t| expectation(t, 0, row, &present)).sum()
    };
    let values: Vec<f64> = (0..1usize << m).map(value).collect();
    (0..m)
        .map(|j| {
            let mut phi = 0.0;
            for mask in 0..1usize << m {
                if mask & (1 << j) != 0 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let w = factorial(s) * factorial(m - s - 1) / factorial(m);
                phi += w * (values[mask | (1 << j)] - values[mask]);
            }
            phi
        })
        .collect()
}

fn gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}

/// Best first-round root gain over every feature, midpoint threshold and
/// missing-value direction.
pub fn exhaustive_root_gain(rows: &[Vec<f64>], y: &[f64], lambda: f64, gamma: f64) -> f64 {
    let base = y.iter().sum::<f64>() / y.len() as f64;
    let g: Vec<f64> = y.iter().map(|v| base - v).collect();
    let mut best = f64::NEG_INFINITY;
    for f in 0..rows[0].len() {
        let mut xs: Vec<f64> = rows.iter().map(|r| r[f]).filter(|x| !x.is_nan()).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for w in xs.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            for missing_left in [true, false] {
                let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
                for (r, gi) in rows.iter().zip(&g) {
                    let left = if r[f].is_nan() { missing_left } else { r[f] < t };
                    if left {
                        gl += gi;
                        hl += 1.0;
                    } else {
                        gr += gi;
                        hr += 1.0;
                    }
                }
                best = best.max(gain(gl, hl, gr, hr, lambda, gamma));
            }
        }
    }
    best
}

/// Gain of the root split a model's first tree actually chose.
pub fn realised_root_gain(tree: &Tree, rows: &[Vec<f64>], y: &[f64], lambda: f64, gamma: f64) -> Option<f64> {
    let base = y.iter().sum::<f64>() / y.len() as f64;
    let Node::Split { left, .. } = tree.nodes[0] else {
        return None;
    };
    let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
    for (r, yi) in rows.iter().zip(y) {
        if tree.next(0, r) == left {
            gl += base - yi;
            hl += 1.0;
        } else {
            gr += base - yi;
            hr += 1.0;
        }
    }
    Some(gain(gl, hl, gr, hr, lambda, gamma))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// A registry of stops `s0..s{n-1}` along the x axis, 100 m apart.
pub fn line_registry(n: usize) -> StopRegistry {
    let mut reg = StopRegistry::new();
    for i in 0..n {
        reg.insert(format!("s{i}"), Point::new(100.0 * i as f64, 0.0)).unwrap();
    }
    reg
}

pub fn leg(card: &str, day: u32, board: u32, alight: u32, from: usize, to: usize) -> Transaction {
    Transaction {
        card_id: card.into(),
        service_date: date(day),
        board_time: board,
        alight_time: alight,
        board_stop: format!("s{from}"),
        alight_stop: format!("s{to}"),
        route: "r1".into(),
    }
}

/// Legs separated by the given gaps (seconds); each leg rides 10 minutes.
pub fn legs_with_gaps(card: &str, first_board: u32, gaps: &[u32]) -> Vec<Transaction> {
    let mut t = first_board;
    let mut out = vec![leg(card, 1, t, t + 600, 0, 1)];
    for (k, g) in gaps.iter().enumerate() {
        t += 600 + g;
        out.push(leg(card, 1, t, t + 600, k + 1, k + 2));
    }
    out
}

/// Trip count the transfer rule predicts for a gap sequence.
pub fn predicted_trips(gaps: &[u32], threshold_s: u32) -> usize {
    1 + gaps.iter().filter(|g| **g > threshold_s).count()
}
