//! SVG scatter plots of 2-D points colored by label.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIZE: f64 = 480.0;
const PAD: f64 = 24.0;
const RADIUS: f64 = 2.5;

/// Colors assigned to labels in order; wraps around after the last entry.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn axis_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
        (l.min(x), h.max(x))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let m = 0.05 * span;
    (lo - m, hi + m)
}

/// Renders an SVG document. `points` is `n x 2`.
pub fn svg_scatter(points: &Tensor, labels: &[usize], title: &str) -> Result<String> {
    if points.ndim() != 2 || points.cols() != 2 {
        return Err(Error::shape(format!(
            "scatter needs n x 2 points, got {:?}",
            points.shape()
        )));
    }
    if labels.len() != points.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} points",
            labels.len(),
            points.rows()
        )));
    }
    if !points.all_finite() {
        return Err(Error::domain("scatter coordinates must be finite"));
    }
    let n = points.rows();
    let (x0, x1) = axis_range((0..n).map(|i| points.at(i, 0)));
    let (y0, y1) = axis_range((0..n).map(|i| points.at(i, 1)));
    let inner = SIZE - 2.0 * PAD;
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * inner;
    // SVG y grows downward
    let sy = |y: f64| PAD + (y1 - y) / (y1 - y0) * inner;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">
<title>{}</title>
<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>
<g stroke="black" stroke-width="1">
<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}"/>
</g>"#,
        escape(title),
        b = SIZE - PAD,
        r = SIZE - PAD,
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-size="10" font-family="sans-serif">x: [{x0:.3}, {x1:.3}]  y: [{y0:.3}, {y1:.3}]</text>"#,
        SIZE - 6.0
    );
    s.push_str("<g stroke=\"none\">\n");
    for i in 0..n {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{RADIUS}" fill="{}"/>"#,
            sx(points.at(i, 0)),
            sy(points.at(i, 1)),
            PALETTE[labels[i] % PALETTE.len()]
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes [`svg_scatter`] output to `path`.
pub fn emit_svg_scatter(points: &Tensor, labels: &[usize], path: &Path, title: &str) -> Result<()> {
    let svg = svg_scatter(points, labels, title)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Projects rows onto the top two principal components.
///
/// Two-column input is returned unchanged and one-column input is padded
/// with zeros. Component signs are fixed so the largest-magnitude loading is
/// positive.
pub fn to_2d(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape(format!("expected a matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    match d {
        2 => return Ok(x.clone()),
        0 => return Ok(Tensor::zeros(&[n, 2])),
        1 => {
            let data = (0..n).flat_map(|i| [x.at(i, 0), 0.0]).collect();
            return Tensor::new(vec![n, 2], data);
        }
        _ => {}
    }
    if n == 0 {
        return Ok(Tensor::zeros(&[0, 2]));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![0.0; n * 2];
    for (c, &idx) in order.iter().take(2).enumerate() {
        let mut axis = eig.eigenvectors.column(idx).into_owned();
        let lead = axis.iter().fold(0.0f64, |a, &v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            axis = -axis;
        }
        let proj = &centered * axis;
        for i in 0..n {
            out[i * 2 + c] = proj[i];
        }
    }
    Tensor::new(vec![n, 2], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_points_three_circles() {
        let p = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let svg = svg_scatter(&p, &[0, 1, 2], "t").unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains(PALETTE[2]));
    }

    #[test]
    fn empty_input_has_axes_only() {
        let svg = svg_scatter(&Tensor::zeros(&[0, 2]), &[], "empty").unwrap();
        assert_eq!(svg.matches("<circle").count(), 0);
        assert_eq!(svg.matches("<line").count(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(svg_scatter(&p, &[0], ""), Err(Error::Domain(_))));
        let p = Tensor::zeros(&[2, 3]);
        assert!(svg_scatter(&p, &[0, 0], "").is_err());
    }

    #[test]
    fn points_stay_inside_canvas() {
        let p = Tensor::from_rows(&[vec![-100.0, 5.0], vec![100.0, 5.0]]).unwrap();
        let svg = svg_scatter(&p, &[0, 1], "").unwrap();
        for cap in svg.split("cx=\"").skip(1) {
            let x: f64 = cap.split('"').next().unwrap().parse().unwrap();
            assert!(x > PAD && x < SIZE - PAD);
        }
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        // points on a line along (1, 1, 0) with tiny spread in z
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 - 10.0;
                vec![t, t, 0.01 * (i % 3) as f64]
            })
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let y = to_2d(&x).unwrap();
        assert_eq!(y.shape(), &[20, 2]);
        for i in 0..20 {
            let t = i as f64 - 10.0 + 0.5;
            assert!((y.at(i, 0) - t * 2f64.sqrt()).abs() < 1e-2);
        }
        let two = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(to_2d(&two).unwrap(), two);
    }
}
