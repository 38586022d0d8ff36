//! Magnetometer array geometry and its plain-text table format.
//!
//! One row per magnetometer, whitespace or comma separated:
//!
//! ```text
//! # id  x  y  z      (meters, body frame)
//! 0  -0.15  -0.12  0.0
//! 1  -0.09  -0.12  0.0
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("cannot access geometry file {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("geometry line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("geometry has no magnetometers")]
    Empty,
    #[error("duplicate magnetometer id {0}")]
    DuplicateId(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Magnetometer {
    pub id: String,
    /// Position in the body frame, meters.
    pub position: Vector3<f64>,
}

/// Rigid arrangement of magnetometers, in a fixed sensor order.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGeometry {
    pub sensors: Vec<Magnetometer>,
}

impl ArrayGeometry {
    pub fn from_positions(positions: &[Vector3<f64>]) -> Self {
        let sensors = positions
            .iter()
            .enumerate()
            .map(|(i, p)| Magnetometer {
                id: i.to_string(),
                position: *p,
            })
            .collect();
        Self { sensors }
    }

    /// 6 x 5 grid at 6 cm pitch centered on the IMU, all in the board plane.
    pub fn rectangular30() -> Self {
        let mut positions = Vec::with_capacity(30);
        for row in 0..5 {
            for col in 0..6 {
                positions.push(Vector3::new(
                    -0.15 + 0.06 * col as f64,
                    -0.12 + 0.06 * row as f64,
                    0.0,
                ));
            }
        }
        Self::from_positions(&positions)
    }

    /// Five sensors: the center plus the corners of a 12 cm square.
    pub fn square5() -> Self {
        Self::from_positions(&[
            Vector3::zeros(),
            Vector3::new(0.06, 0.06, 0.0),
            Vector3::new(-0.06, 0.06, 0.0),
            Vector3::new(-0.06, -0.06, 0.0),
            Vector3::new(0.06, -0.06, 0.0),
        ])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "rectangular" | "rectangular30" => Some(Self::rectangular30()),
            "square" | "square5" => Some(Self::square5()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.sensors.iter().map(|s| s.position).collect()
    }

    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut sensors: Vec<Magnetometer> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            if fields.len() != 4 {
                return Err(GeometryError::Parse {
                    line: idx + 1,
                    msg: format!("expected 4 fields (id x y z), found {}", fields.len()),
                });
            }
            let mut xyz = [0.0; 3];
            for (k, f) in fields[1..].iter().enumerate() {
                let v: f64 = f.parse().map_err(|_| GeometryError::Parse {
                    line: idx + 1,
                    msg: format!("invalid coordinate {f:?}"),
                })?;
                if !v.is_finite() {
                    return Err(GeometryError::Parse {
                        line: idx + 1,
                        msg: format!("non-finite coordinate {f:?}"),
                    });
                }
                xyz[k] = v;
            }
            let id = fields[0].to_string();
            if sensors.iter().any(|s| s.id == id) {
                return Err(GeometryError::DuplicateId(id));
            }
            sensors.push(Magnetometer {
                id,
                position: Vector3::from(xyz),
            });
        }
        if sensors.is_empty() {
            return Err(GeometryError::Empty);
        }
        Ok(Self { sensors })
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# id x y z (meters, body frame)\n");
        for s in &self.sensors {
            let p = s.position;
            let _ = writeln!(out, "{} {} {} {}", s.id, p.x, p.y, p.z);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_text()).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_sizes() {
        assert_eq!(ArrayGeometry::rectangular30().len(), 30);
        assert_eq!(ArrayGeometry::square5().len(), 5);
        assert!(ArrayGeometry::preset("hexagon").is_none());
    }

    #[test]
    fn text_round_trip() {
        let g = ArrayGeometry::rectangular30();
        assert_eq!(ArrayGeometry::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            ArrayGeometry::parse("# nothing\n"),
            Err(GeometryError::Empty)
        ));
        assert!(matches!(
            ArrayGeometry::parse("a 0 0\n"),
            Err(GeometryError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            ArrayGeometry::parse("a 0 0 0\nb 0 x 0\n"),
            Err(GeometryError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            ArrayGeometry::parse("a 0 0 0\na 1 0 0\n"),
            Err(GeometryError::DuplicateId(_))
        ));
    }

    #[test]
    fn accepts_comma_separated_rows() {
        let g = ArrayGeometry::parse("m1, 0.1, -0.2, 0.0\n").unwrap();
        assert_eq!(g.sensors[0].id, "m1");
        assert_eq!(g.sensors[0].position, Vector3::new(0.1, -0.2, 0.0));
    }
}
