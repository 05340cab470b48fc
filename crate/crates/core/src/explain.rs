//! SHAP attributions for boosted tree models.
//!
//! `shap_values` implements path-dependent TreeSHAP: expectations over absent
//! features are taken with respect to the training covers stored in each node.
//! `conditional_expectation` evaluates the same expectation by direct
//! traversal and serves as the brute-force reference.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::boost::{BoostedModel, Dataset, Node, Tree};
use crate::error::{Error, Result};

/// Cover-weighted expectation of `tree` given only the features flagged in
/// `present`.
pub fn conditional_expectation(tree: &Tree, row: &[f64], present: &[bool]) -> Result<f64> {
    fn walk(tree: &Tree, at: usize, row: &[f64], present: &[bool]) -> Result<f64> {
        match tree.nodes[at] {
            Node::Leaf { value, .. } => Ok(value),
            Node::Split {
                feature,
                left,
                right,
                cover,
                ..
            } => {
                if present[feature] {
                    return walk(tree, tree.next(at, row), row, present);
                }
                if cover <= 0.0 {
                    return Err(Error::ZeroCover { tree: 0, node: at });
                }
                let wl = tree.nodes[left].cover() / cover;
                let wr = tree.nodes[right].cover() / cover;
                Ok(wl * walk(tree, left, row, present)? + wr * walk(tree, right, row, present)?)
            }
        }
    }
    walk(tree, 0, row, present)
}

/// Rejects trees with an internal node whose training cover is zero.
pub fn check_covers(model: &BoostedModel) -> Result<()> {
    for (t, tree) in model.trees.iter().enumerate() {
        for (i, n) in tree.nodes.iter().enumerate() {
            if matches!(n, Node::Split { .. }) && n.cover() <= 0.0 {
                return Err(Error::ZeroCover { tree: t, node: i });
            }
        }
    }
    Ok(())
}

/// SHAP base value: the cover-weighted expectation of the whole ensemble.
pub fn base_value(model: &BoostedModel) -> f64 {
    model.base_score + model.trees.iter().map(Tree::expected_value).sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: usize,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

const NO_FEATURE: usize = usize::MAX;

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: usize) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let fi = i as f64;
        path[i + 1].weight += one_fraction * path[i].weight * (fi + 1.0) / (d + 1.0);
        path[i].weight = zero_fraction * path[i].weight * (d - fi) / (d + 1.0);
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let mut next_one = path[depth].weight;
    for i in (0..depth).rev() {
        let fi = i as f64;
        if one_fraction != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one * (d + 1.0) / ((fi + 1.0) * one_fraction);
            next_one = tmp - path[i].weight * zero_fraction * (d - fi) / (d + 1.0);
        } else {
            path[i].weight = path[i].weight * (d + 1.0) / (zero_fraction * (d - fi));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

fn unwound_path_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let mut next_one = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        let fi = i as f64;
        if one_fraction != 0.0 {
            let tmp = next_one * (d + 1.0) / ((fi + 1.0) * one_fraction);
            total += tmp;
            next_one = path[i].weight - tmp * zero_fraction * (d - fi) / (d + 1.0);
        } else {
            total += path[i].weight / zero_fraction / ((d - fi) / (d + 1.0));
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    at: usize,
    row: &[f64],
    phi: &mut [f64],
    parent: &[PathElement],
    zero_fraction: f64,
    one_fraction: f64,
    feature: usize,
) {
    let mut path = parent.to_vec();
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    match tree.nodes[at] {
        Node::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_path_sum(&path, i);
                let el = path[i];
                phi[el.feature] += w * (el.one_fraction - el.zero_fraction) * value;
            }
        }
        Node::Split {
            feature: split,
            left,
            right,
            cover,
            ..
        } => {
            let hot = tree.next(at, row);
            let cold = if hot == left { right } else { left };
            let hot_zero = tree.nodes[hot].cover() / cover;
            let cold_zero = tree.nodes[cold].cover() / cover;
            let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == split) {
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            recurse(tree, hot, row, phi, &path, hot_zero * incoming_zero, incoming_one, split);
            recurse(tree, cold, row, phi, &path, cold_zero * incoming_zero, 0.0, split);
        }
    }
}

/// Adds the SHAP values of one tree for `row` into `phi`.
pub fn tree_shap(tree: &Tree, row: &[f64], phi: &mut [f64]) {
    if tree.is_leaf_only() {
        return;
    }
    recurse(tree, 0, row, phi, &[], 1.0, 1.0, NO_FEATURE);
}

/// Per-feature attributions and base value for one row.
pub fn shap_values(model: &BoostedModel, row: &[f64]) -> (Vec<f64>, f64) {
    let mut phi = vec![0.0; model.n_features];
    for tree in &model.trees {
        tree_shap(tree, row, &mut phi);
    }
    (phi, base_value(model))
}

/// SHAP values for every row of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapMatrix {
    pub base: f64,
    pub n_features: usize,
    /// Row-major, `n_rows * n_features`.
    pub values: Vec<f64>,
}

impl ShapMatrix {
    pub fn compute(model: &BoostedModel, data: &Dataset) -> Result<Self> {
        check_covers(model)?;
        if data.n_features() != model.n_features {
            return Err(Error::UndefinedInput(format!(
                "dataset has {} features, model expects {}",
                data.n_features(),
                model.n_features
            )));
        }
        let rows: Vec<Vec<f64>> = (0..data.n_rows())
            .into_par_iter()
            .map(|i| shap_values(model, data.row(i)).0)
            .collect();
        Ok(ShapMatrix {
            base: base_value(model),
            n_features: model.n_features,
            values: rows.concat(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.len().checked_div(self.n_features).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn get(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.n_features + feature]
    }

    pub fn mean_abs(&self) -> Vec<f64> {
        let n = self.n_rows();
        (0..self.n_features)
            .map(|f| (0..n).map(|i| self.get(i, f).abs()).sum::<f64>() / n as f64)
            .collect()
    }

    pub fn scaled(&self, k: f64) -> ShapMatrix {
        ShapMatrix {
            base: self.base * k,
            n_features: self.n_features,
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }
}

/// Relative importance in percent from mean absolute SHAP values.
pub fn relative_importance(shap: &ShapMatrix) -> Result<Vec<f64>> {
    if shap.n_rows() == 0 {
        return Err(Error::UndefinedInput("relative importance needs at least one row".into()));
    }
    let mean = shap.mean_abs();
    let total: f64 = mean.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateModel);
    }
    Ok(mean.iter().map(|m| m / total * 100.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependenceData {
    pub feature: usize,
    /// `(feature value, SHAP value)`, ascending by feature value.
    pub points: Vec<(f64, f64)>,
    pub excluded_missing: usize,
}

pub fn dependence_data(shap: &ShapMatrix, data: &Dataset, feature: usize) -> Result<DependenceData> {
    if feature >= shap.n_features || shap.n_rows() != data.n_rows() {
        return Err(Error::UndefinedInput(format!("no dependence data for feature {feature}")));
    }
    let mut points = Vec::with_capacity(data.n_rows());
    let mut excluded_missing = 0;
    for i in 0..data.n_rows() {
        let x = data.value(i, feature);
        if x.is_nan() {
            excluded_missing += 1;
        } else {
            points.push((x, shap.get(i, feature)));
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(DependenceData {
        feature,
        points,
        excluded_missing,
    })
}

impl DependenceData {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature_value", "shap_value"])?;
        for (x, s) in &self.points {
            w.write_record([x.to_string(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<dependence csv>", e))?;
        Ok(())
    }

    /// Mean SHAP value over `bins` consecutive runs of (nearly) equal size,
    /// returned as `(mean feature value, mean SHAP value)` per bin.
    pub fn binned_means(&self, bins: usize) -> Vec<(f64, f64)> {
        let n = self.points.len();
        let bins = bins.min(n);
        (0..bins)
            .map(|b| {
                let chunk = &self.points[b * n / bins..(b + 1) * n / bins];
                let k = chunk.len() as f64;
                (
                    chunk.iter().map(|p| p.0).sum::<f64>() / k,
                    chunk.iter().map(|p| p.1).sum::<f64>() / k,
                )
            })
            .collect()
    }

    /// Standalone SVG scatter plot of the dependence points.
    pub fn to_svg(&self, x_label: &str) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const PAD: f64 = 40.0;
        let range = |it: &mut dyn Iterator<Item = f64>| {
            it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (x0, x1) = range(&mut self.points.iter().map(|p| p.0));
        let (y0, y1) = range(&mut self.points.iter().map(|p| p.1).chain([0.0]));
        let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(f64::EPSILON) * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0).max(f64::EPSILON) * (H - 2.0 * PAD);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
        );
        s += &format!(
            "<line x1=\"{PAD}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#999\"/>\n",
            y = sy(0.0),
            x2 = W - PAD
        );
        for (x, y) in &self.points {
            s += &format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"#1f77b4\"/>\n", sx(*x), sy(*y));
        }
        s += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            W / 2.0,
            H - 10.0,
            x_label
        );
        s += &format!(
            "<text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">SHAP value</text>\n</svg>\n",
            H / 2.0,
            H / 2.0
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boost::{fit, BoostParams};

    fn stump(a: f64, b: f64) -> BoostedModel {
        BoostedModel {
            base_score: 0.0,
            trees: vec![Tree {
                nodes: vec![
                    Node::Split {
                        feature: 1,
                        threshold: 0.5,
                        default_left: true,
                        left: 1,
                        right: 2,
                        cover: 100.0,
                    },
                    Node::Leaf { value: a, cover: 50.0 },
                    Node::Leaf { value: b, cover: 50.0 },
                ],
            }],
            n_features: 3,
            params: BoostParams::default(),
        }
    }

    #[test]
    fn conditional_expectation_cases() {
        let m = stump(3.0, 1.0);
        let t = &m.trees[0];
        let row = [0.0, 0.0, 0.0];
        assert_eq!(conditional_expectation(t, &row, &[true; 3]).unwrap(), t.predict(&row));
        assert_eq!(conditional_expectation(t, &row, &[false; 3]).unwrap(), 2.0);
        let leaf = Tree::leaf(7.0, 4.0);
        assert_eq!(conditional_expectation(&leaf, &row, &[false, true, false]).unwrap(), 7.0);
    }

    #[test]
    fn zero_cover_is_rejected() {
        let mut m = stump(1.0, 2.0);
        if let Node::Split { cover, .. } = &mut m.trees[0].nodes[0] {
            *cover = 0.0;
        }
        assert!(matches!(
            conditional_expectation(&m.trees[0], &[0.0; 3], &[false; 3]),
            Err(Error::ZeroCover { .. })
        ));
        let data = Dataset::new(vec![vec![0.0; 3]], vec![0.0]).unwrap();
        assert!(ShapMatrix::compute(&m, &data).is_err());
    }

    #[test]
    fn stump_attribution() {
        let (a, b) = (3.0, -1.0);
        let (phi, base) = shap_values(&stump(a, b), &[9.0, 0.0, 9.0]);
        assert_eq!(base, (a + b) / 2.0);
        assert_eq!(phi, vec![0.0, (a - b) / 2.0, 0.0]);
    }

    #[test]
    fn zero_tree_model_has_no_attribution() {
        let data = Dataset::new(vec![vec![1.0, 2.0]; 5], vec![3.0; 5]).unwrap();
        let m = fit(&data, &BoostParams::default()).unwrap();
        let (phi, base) = shap_values(&m, &[1.0, 2.0]);
        assert_eq!(phi, vec![0.0, 0.0]);
        assert_eq!(base, 3.0);
        let shap = ShapMatrix::compute(&m, &data).unwrap();
        assert!(matches!(relative_importance(&shap), Err(Error::DegenerateModel)));
    }

    #[test]
    fn repeated_feature_on_path() {
        // x0 split twice along one path exercises path unwinding.
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 1.0, default_left: true, left: 1, right: 2, cover: 10.0 },
                Node::Split { feature: 1, threshold: 1.0, default_left: true, left: 3, right: 4, cover: 6.0 },
                Node::Leaf { value: 5.0, cover: 4.0 },
                Node::Split { feature: 0, threshold: 0.0, default_left: false, left: 5, right: 6, cover: 3.0 },
                Node::Leaf { value: -2.0, cover: 3.0 },
                Node::Leaf { value: 1.0, cover: 1.0 },
                Node::Leaf { value: 2.5, cover: 2.0 },
            ],
        };
        let m = BoostedModel { base_score: 0.5, trees: vec![t], n_features: 2, params: BoostParams::default() };
        for row in [[0.5, 0.0], [-1.0, 0.0], [0.5, 3.0], [2.0, 0.0], [f64::NAN, 0.0]] {
            let (phi, base) = shap_values(&m, &row);
            assert!((base + phi.iter().sum::<f64>() - m.predict(&row)).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_normalisation() {
        let shap = ShapMatrix { base: 0.0, n_features: 3, values: vec![2.0, -3.0, 5.0, -2.0, 3.0, 5.0] };
        let ri = relative_importance(&shap).unwrap();
        for (got, want) in ri.iter().zip([20.0, 30.0, 50.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let single = ShapMatrix { base: 0.0, n_features: 2, values: vec![0.0, 1.0] };
        assert_eq!(relative_importance(&single).unwrap(), vec![0.0, 100.0]);
    }

    #[test]
    fn dependence_sorted_with_missing_count() {
        let data = Dataset::new(vec![vec![3.0], vec![f64::NAN], vec![1.0], vec![2.0]], vec![0.0; 4]).unwrap();
        let shap = ShapMatrix { base: 0.0, n_features: 1, values: vec![0.3, 0.9, 0.1, 0.2] };
        let d = dependence_data(&shap, &data, 0).unwrap();
        assert_eq!(d.points, vec![(1.0, 0.1), (2.0, 0.2), (3.0, 0.3)]);
        assert_eq!(d.excluded_missing, 1);
        assert!(dependence_data(&shap, &data, 1).is_err());
        let svg = d.to_svg("x");
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(d.binned_means(3), vec![(1.0, 0.1), (2.0, 0.2), (3.0, 0.3)]);
    }
}
