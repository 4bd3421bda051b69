//! Digital elevation model: a regular grid of altitudes with continuous
//! bilinear queries.
//!
//! The grid is immutable after construction. Out-of-bounds queries are an
//! error rather than clamped extrapolation so a mis-georeferenced
//! trajectory fails loudly instead of silently reading edge values.
//!
//! File format: header `DEM <origin_x> <origin_y> <spacing> <rows> <cols>`
//! followed by `rows` lines of `cols` whitespace-separated elevations in
//! meters. Values round-trip bit-exactly as decimal text.

use thiserror::Error;

/// Errors from DEM construction, queries and parsing.
#[derive(Debug, Error, PartialEq)]
pub enum DemError {
    #[error("query ({x}, {y}) outside the DEM bounds")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid DEM grid: {0}")]
    InvalidGrid(String),
    #[error("DEM parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Regularly spaced elevation grid. `x` maps to columns, `y` to rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DemGrid {
    origin: [f64; 2],
    spacing: f64,
    rows: usize,
    cols: usize,
    /// Row-major elevations, `rows * cols` values.
    elevations: Vec<f64>,
}

impl DemGrid {
    /// Builds a grid, validating shape, spacing and finiteness.
    pub fn new(
        origin: [f64; 2],
        spacing: f64,
        rows: usize,
        cols: usize,
        elevations: Vec<f64>,
    ) -> Result<Self, DemError> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(DemError::InvalidGrid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        if rows < 2 || cols < 2 {
            return Err(DemError::InvalidGrid(format!(
                "grid must be at least 2x2, got {rows}x{cols}"
            )));
        }
        if elevations.len() != rows * cols {
            return Err(DemError::InvalidGrid(format!(
                "expected {} elevations, got {}",
                rows * cols,
                elevations.len()
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) || !elevations.iter().all(|v| v.is_finite()) {
            return Err(DemError::InvalidGrid("non-finite value".into()));
        }
        Ok(Self {
            origin,
            spacing,
            rows,
            cols,
            elevations,
        })
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Stored elevation at grid indices (row, col).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.elevations[row * self.cols + col]
    }

    /// Bilinear altitude at `(x, y)`; exact at grid points.
    pub fn query(&self, x: f64, y: f64) -> Result<f64, DemError> {
        let u = (x - self.origin[0]) / self.spacing;
        let v = (y - self.origin[1]) / self.spacing;
        let max_u = (self.cols - 1) as f64;
        let max_v = (self.rows - 1) as f64;
        if !(0.0..=max_u).contains(&u) || !(0.0..=max_v).contains(&v) {
            return Err(DemError::OutOfBounds { x, y });
        }
        // Clamp the cell index so queries on the far edges still land in a
        // valid cell with a fractional offset of exactly 1.
        let c0 = (u.floor() as usize).min(self.cols - 2);
        let r0 = (v.floor() as usize).min(self.rows - 2);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let e00 = self.at(r0, c0);
        let e01 = self.at(r0, c0 + 1);
        let e10 = self.at(r0 + 1, c0);
        let e11 = self.at(r0 + 1, c0 + 1);
        Ok(e00 * (1.0 - fu) * (1.0 - fv)
            + e01 * fu * (1.0 - fv)
            + e10 * (1.0 - fu) * fv
            + e11 * fu * fv)
    }

    /// Refines the grid by an integer factor; output spacing is
    /// `spacing / factor` and values are bilinear samples of this grid.
    pub fn densify(&self, factor: usize) -> DemGrid {
        assert!(factor >= 1, "densify factor must be at least 1");
        if factor == 1 {
            return self.clone();
        }
        let rows = (self.rows - 1) * factor + 1;
        let cols = (self.cols - 1) * factor + 1;
        let spacing = self.spacing / factor as f64;
        let mut elevations = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = self.origin[0] + c as f64 * spacing;
                let y = self.origin[1] + r as f64 * spacing;
                elevations.push(self.query(x, y).expect("densified point in bounds"));
            }
        }
        DemGrid {
            origin: self.origin,
            spacing,
            rows,
            cols,
            elevations,
        }
    }

    /// Serializes to the plain-text DEM format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "DEM {} {} {} {} {}\n",
            self.origin[0], self.origin[1], self.spacing, self.rows, self.cols
        );
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| self.at(r, c).to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses the plain-text DEM format.
    pub fn from_text(text: &str) -> Result<Self, DemError> {
        let mut lines = text.lines().enumerate();
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| DemError::Parse {
                line: 1,
                message: "empty input".into(),
            })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "DEM" {
            return Err(DemError::Parse {
                line: line_no + 1,
                message: "expected header `DEM <ox> <oy> <spacing> <rows> <cols>`".into(),
            });
        }
        let parse_f = |s: &str, line: usize| -> Result<f64, DemError> {
            s.parse().map_err(|_| DemError::Parse {
                line,
                message: format!("bad number `{s}`"),
            })
        };
        let ox = parse_f(fields[1], line_no + 1)?;
        let oy = parse_f(fields[2], line_no + 1)?;
        let spacing = parse_f(fields[3], line_no + 1)?;
        let rows: usize = fields[4].parse().map_err(|_| DemError::Parse {
            line: line_no + 1,
            message: format!("bad row count `{}`", fields[4]),
        })?;
        let cols: usize = fields[5].parse().map_err(|_| DemError::Parse {
            line: line_no + 1,
            message: format!("bad col count `{}`", fields[5]),
        })?;
        let mut elevations = Vec::with_capacity(rows.saturating_mul(cols));
        for (line_no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            for field in line.split_whitespace() {
                elevations.push(parse_f(field, line_no + 1)?);
            }
        }
        DemGrid::new([ox, oy], spacing, rows, cols, elevations)
    }

    /// Reads a DEM file.
    pub fn read_file(path: &std::path::Path) -> Result<Self, DemError> {
        let text = std::fs::read_to_string(path).map_err(|e| DemError::Parse {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_text(&text)
    }

    /// Writes the DEM file.
    pub fn write_file(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_grid(value: f64) -> DemGrid {
        DemGrid::new([0.0, 0.0], 1.0, 4, 5, vec![value; 20]).unwrap()
    }

    /// Direct bilinear formula, written independently of `query`'s
    /// index/clamp logic, as the interpolation oracle.
    fn bilinear_oracle(g: &DemGrid, x: f64, y: f64) -> f64 {
        let u = (x - g.origin()[0]) / g.spacing();
        let v = (y - g.origin()[1]) / g.spacing();
        let c0 = (u.floor() as usize).min(g.cols() - 2);
        let r0 = (v.floor() as usize).min(g.rows() - 2);
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let top = g.at(r0, c0) + (g.at(r0, c0 + 1) - g.at(r0, c0)) * fu;
        let bot = g.at(r0 + 1, c0) + (g.at(r0 + 1, c0 + 1) - g.at(r0 + 1, c0)) * fu;
        top + (bot - top) * fv
    }

    #[test]
    fn constant_grid_queries_constant() {
        let g = constant_grid(5.0);
        for (x, y) in [(0.0, 0.0), (1.7, 2.3), (4.0, 3.0), (3.999, 0.001)] {
            assert_eq!(g.query(x, y).unwrap(), 5.0);
        }
    }

    #[test]
    fn midpoint_of_split_corners_is_average() {
        // Corners 0,0 on one edge and 10,10 on the opposite edge.
        let g = DemGrid::new([0.0, 0.0], 10.0, 2, 2, vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        assert!((g.query(5.0, 5.0).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        let g = constant_grid(1.0);
        assert!(matches!(
            g.query(-0.1, 0.0),
            Err(DemError::OutOfBounds { .. })
        ));
        assert!(matches!(
            g.query(0.0, 3.0001),
            Err(DemError::OutOfBounds { .. })
        ));
        // Far corner is inclusive.
        assert!(g.query(4.0, 3.0).is_ok());
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(DemGrid::new([0.0, 0.0], 0.0, 2, 2, vec![0.0; 4]).is_err());
        assert!(DemGrid::new([0.0, 0.0], 1.0, 1, 2, vec![0.0; 2]).is_err());
        assert!(DemGrid::new([0.0, 0.0], 1.0, 2, 2, vec![0.0; 3]).is_err());
        assert!(DemGrid::new([0.0, 0.0], 1.0, 2, 2, vec![0.0, 1.0, 2.0, f64::NAN]).is_err());
    }

    #[test]
    fn densify_factor_one_is_identical() {
        let g = constant_grid(2.5);
        assert_eq!(g.densify(1), g);
    }

    #[test]
    fn densify_constant_grid() {
        let g = constant_grid(3.0).densify(4);
        assert_eq!(g.spacing(), 0.25);
        assert_eq!((g.rows(), g.cols()), (13, 17));
        assert!((0..g.rows()).all(|r| (0..g.cols()).all(|c| g.at(r, c) == 3.0)));
    }

    #[test]
    fn densify_linear_ramp_stays_planar() {
        let mut elev = Vec::new();
        for r in 0..3 {
            for c in 0..4 {
                elev.push(2.0 * c as f64 + 3.0 * r as f64 + 1.0);
            }
        }
        let g = DemGrid::new([0.0, 0.0], 2.0, 3, 4, elev).unwrap().densify(2);
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                let x = c as f64 * g.spacing();
                let y = r as f64 * g.spacing();
                let plane = x + 1.5 * y + 1.0;
                assert!((g.at(r, c) - plane).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn prop_query_matches_bilinear_oracle(
            seed_vals in proptest::collection::vec(-50.0f64..50.0, 12),
            qx in 0.0f64..3.0,
            qy in 0.0f64..2.0,
        ) {
            let g = DemGrid::new([0.0, 0.0], 1.0, 3, 4, seed_vals).unwrap();
            let mine = g.query(qx, qy).unwrap();
            let oracle = bilinear_oracle(&g, qx, qy);
            prop_assert!((mine - oracle).abs() < 1e-12);
        }

        #[test]
        fn prop_exact_at_grid_points(
            vals in proptest::collection::vec(-100.0f64..100.0, 6),
            r in 0usize..2,
            c in 0usize..3,
        ) {
            let g = DemGrid::new([3.0, -2.0], 2.5, 2, 3, vals).unwrap();
            let x = 3.0 + c as f64 * 2.5;
            let y = -2.0 + r as f64 * 2.5;
            prop_assert_eq!(g.query(x, y).unwrap(), g.at(r, c));
        }

        #[test]
        fn prop_continuous_across_cell_boundaries(
            vals in proptest::collection::vec(-10.0f64..10.0, 9),
            y in 0.0f64..2.0,
        ) {
            let g = DemGrid::new([0.0, 0.0], 1.0, 3, 3, vals).unwrap();
            let eps = 1e-9;
            let lo = g.query(1.0 - eps, y).unwrap();
            let hi = g.query(1.0 + eps, y).unwrap();
            prop_assert!((lo - hi).abs() < 1e-6);
        }

        #[test]
        fn prop_densify_agrees_with_coarse_query(
            vals in proptest::collection::vec(-10.0f64..10.0, 9),
            factor in 1usize..5,
        ) {
            let coarse = DemGrid::new([1.0, 2.0], 3.0, 3, 3, vals).unwrap();
            let fine = coarse.densify(factor);
            prop_assert_eq!(fine.spacing(), 3.0 / factor as f64);
            for r in 0..fine.rows() {
                for c in 0..fine.cols() {
                    let x = fine.origin()[0] + c as f64 * fine.spacing();
                    let y = fine.origin()[1] + r as f64 * fine.spacing();
                    let want = coarse.query(x, y).unwrap();
                    prop_assert!((fine.at(r, c) - want).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn prop_text_round_trip_is_byte_identical(
            vals in proptest::collection::vec(-1e6f64..1e6, 8),
            ox in -100.0f64..100.0,
            oy in -100.0f64..100.0,
            spacing in 0.1f64..50.0,
        ) {
            let g = DemGrid::new([ox, oy], spacing, 2, 4, vals).unwrap();
            let text = g.to_text();
            let parsed = DemGrid::from_text(&text).unwrap();
            prop_assert_eq!(&parsed, &g);
            prop_assert_eq!(parsed.to_text(), text);
        }
    }
}
