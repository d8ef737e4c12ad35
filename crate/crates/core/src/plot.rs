//! Deterministic SVG scatter plots of 2-D embeddings.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::metrics::Predictor;
use crate::projection::Autoencoder;

/// Class colors, indexed by label modulo the palette length.
pub const PALETTE: [&str; 20] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
];
pub const UNLABELED: &str = "#444444";
pub const MARGIN_FRACTION: f64 = 0.05;

pub fn class_color(label: u32) -> &'static str {
    PALETTE[label as usize % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    /// Data extent padded by 5% on each side; a zero-width axis gets unit width.
    pub fn of(coords: ArrayView2<'_, f64>) -> Result<Self> {
        if coords.ncols() != 2 || coords.nrows() == 0 {
            return Err(Error::Shape(format!(
                "expected a non-empty N x 2 array, got {:?}",
                coords.dim()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("cannot plot non-finite coordinates".into()));
        }
        let axis = |c: usize| {
            let col = coords.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let pad = span * MARGIN_FRACTION;
            let mid = 0.5 * (lo + hi);
            if hi > lo {
                (lo - pad, hi + pad)
            } else {
                (mid - 0.5 - pad, mid + 0.5 + pad)
            }
        };
        let (x_min, x_max) = axis(0);
        let (y_min, y_max) = axis(1);
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }
}

/// Predicted class of decoded grid cells, row-major from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionMap {
    pub bounds: Bounds,
    pub resolution: usize,
    pub classes: Vec<u32>,
}

/// Decodes the centre of each cell of a `resolution x resolution` grid and
/// classifies the reconstruction.
pub fn decision_map<P: Predictor + ?Sized>(
    model: &Autoencoder,
    predictor: &P,
    bounds: Bounds,
    resolution: usize,
) -> Result<DecisionMap> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let cell_w = (bounds.x_max - bounds.x_min) / resolution as f64;
    let cell_h = (bounds.y_max - bounds.y_min) / resolution as f64;
    let grid = Array2::from_shape_fn((resolution * resolution, 2), |(i, c)| {
        let (row, col) = (i / resolution, i % resolution);
        if c == 0 {
            bounds.x_min + (col as f64 + 0.5) * cell_w
        } else {
            bounds.y_max - (row as f64 + 0.5) * cell_h
        }
    });
    let decoded = model.decode(grid.view())?;
    let classes = decoded
        .rows()
        .into_iter()
        .map(|r| predictor.predict(&r.to_vec()))
        .collect();
    Ok(DecisionMap {
        bounds,
        resolution,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    pub width: u32,
    pub height: u32,
    pub radius: f64,
    pub title: Option<String>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            width: 640,
            height: 640,
            radius: 2.5,
            title: None,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot colored by label. With a decision map, cells are shaded by
/// predicted class and cells on a class boundary are left white.
pub fn scatter_svg(
    coords: ArrayView2<'_, f64>,
    labels: Option<&[u32]>,
    opts: &PlotOptions,
    background: Option<&DecisionMap>,
) -> Result<String> {
    if let Some(l) = labels {
        if l.len() != coords.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                l.len(),
                coords.nrows()
            )));
        }
    }
    let bounds = match background {
        Some(map) => map.bounds,
        None => Bounds::of(coords)?,
    };
    let (w, h) = (opts.width as f64, opts.height as f64);
    let sx = |x: f64| (x - bounds.x_min) / (bounds.x_max - bounds.x_min) * w;
    let sy = |y: f64| (bounds.y_max - y) / (bounds.y_max - bounds.y_min) * h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        opts.width, opts.height, opts.width, opts.height
    );
    let _ = writeln!(
        svg,
        r##"<rect x="0" y="0" width="{}" height="{}" fill="#ffffff"/>"##,
        opts.width, opts.height
    );

    if let Some(map) = background {
        let r = map.resolution;
        let (cw, ch) = (w / r as f64, h / r as f64);
        let _ = writeln!(svg, r#"<g id="decision-map" fill-opacity="0.25">"#);
        for row in 0..r {
            for col in 0..r {
                let c = map.classes[row * r + col];
                let boundary = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|(dr, dc)| {
                    let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                    nr >= 0
                        && nc >= 0
                        && (nr as usize) < r
                        && (nc as usize) < r
                        && map.classes[nr as usize * r + nc as usize] != c
                });
                if boundary {
                    continue;
                }
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                    col as f64 * cw,
                    row as f64 * ch,
                    cw,
                    ch,
                    class_color(c)
                );
            }
        }
        let _ = writeln!(svg, "</g>");
    }

    let _ = writeln!(svg, r#"<g id="points" stroke="none">"#);
    for (i, p) in coords.rows().into_iter().enumerate() {
        let fill = labels.map(|l| class_color(l[i])).unwrap_or(UNLABELED);
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{}" fill="{}"/>"#,
            sx(p[0]),
            sy(p[1]),
            opts.radius,
            fill
        );
    }
    let _ = writeln!(svg, "</g>");
    if let Some(title) = &opts.title {
        let _ = writeln!(
            svg,
            r##"<text x="8" y="18" font-family="sans-serif" font-size="14" fill="#000000">{}</text>"##,
            escape(title)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::init_model;
    use ndarray::array;
    use std::collections::BTreeSet;

    fn fills(svg: &str) -> Vec<String> {
        svg.lines()
            .filter(|l| l.starts_with("<circle"))
            .map(|l| {
                l.split("fill=\"")
                    .nth(1)
                    .unwrap()
                    .split('"')
                    .next()
                    .unwrap()
                    .to_string()
            })
            .collect()
    }

    #[test]
    fn three_labeled_points() {
        let c = array![[0.0, 0.0], [1.0, 2.0], [-3.0, 0.5]];
        let svg = scatter_svg(c.view(), Some(&[0, 1, 2]), &PlotOptions::default(), None).unwrap();
        let f = fills(&svg);
        assert_eq!(f.len(), 3);
        assert_eq!(f.iter().collect::<BTreeSet<_>>().len(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn deterministic_and_inside_viewport() {
        let c = array![[5.0, 5.0], [6.0, 9.0], [7.0, 5.5]];
        let opts = PlotOptions {
            title: Some("epoch <3>".into()),
            ..PlotOptions::default()
        };
        let a = scatter_svg(c.view(), None, &opts, None).unwrap();
        assert_eq!(a, scatter_svg(c.view(), None, &opts, None).unwrap());
        assert!(a.contains("epoch &lt;3&gt;"));
        for line in a.lines().filter(|l| l.starts_with("<circle")) {
            let num = |key: &str| -> f64 {
                line.split(key)
                    .nth(1)
                    .unwrap()
                    .split('"')
                    .next()
                    .unwrap()
                    .parse()
                    .unwrap()
            };
            let (x, y) = (num("cx=\""), num("cy=\""));
            assert!((640.0 * 0.04..=640.0 * 0.96).contains(&x), "{line}");
            assert!((0.0..=640.0).contains(&y));
        }
    }

    #[test]
    fn degenerate_bounds() {
        let c = array![[1.0, 1.0], [1.0, 1.0]];
        let b = Bounds::of(c.view()).unwrap();
        assert!(b.x_max > b.x_min && b.y_max > b.y_min);
        assert!(Bounds::of(array![[f64::NAN, 0.0]].view()).is_err());
    }

    #[test]
    fn decision_map_background() {
        let model = init_model(32, 32, 0).unwrap();
        let predictor = |x: &[f64]| u32::from(x[0] > 0.0);
        let c = array![[-1.0, -1.0], [1.0, 1.0]];
        let map = decision_map(&model, &predictor, Bounds::of(c.view()).unwrap(), 8).unwrap();
        assert_eq!(map.classes.len(), 64);
        let svg = scatter_svg(c.view(), Some(&[0, 1]), &PlotOptions::default(), Some(&map)).unwrap();
        assert!(svg.contains("decision-map"));
        assert_eq!(fills(&svg).len(), 2);
    }
}
