//! Orthographic point-splat rasterizer.
//!
//! Every vertex splats a filled disc; a per-pixel z-buffer keeps the nearest
//! vertex, with ties going to the lower vertex index. Rendering is split into
//! [`rasterize`] (which vertex owns each pixel) and [`shade`] (look up
//! colors), so training can hold the assignment fixed while gradients flow
//! into colors.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::head::AvatarState;
use crate::rotation::{self, Mat3};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Rows are the image right, image up and towards-viewer axes.
    pub frame: Mat3,
    pub extent_width: f64,
    pub extent_height: f64,
    pub height: usize,
    pub width: usize,
    pub splat_radius: f64,
}

impl Camera {
    /// Looks down `-z` at the default head, which spans roughly `[-1, 1]` in y.
    pub fn front(resolution: usize, splat_radius: f64) -> Result<Self> {
        let cam = Camera {
            frame: rotation::IDENTITY,
            extent_width: 2.4,
            extent_height: 2.4,
            height: resolution,
            width: resolution,
            splat_radius,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "raster must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.extent_width > 0.0 && self.extent_height > 0.0 && self.splat_radius >= 0.0) {
            return Err(Error::Config("camera extents must be positive".into()));
        }
        let gram = rotation::mat_mul(&self.frame, &rotation::transpose(&self.frame));
        for (i, row) in gram.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (g - want).abs() > 1e-9 {
                    return Err(Error::Config("camera frame is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Pixel-space position `(column, row)` and depth (smaller is nearer).
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let l = rotation::apply(&self.frame, p);
        let px = (l[0] / self.extent_width + 0.5) * self.width as f64;
        let py = (0.5 - l[1] / self.extent_height) * self.height as f64;
        (px, py, -l[2])
    }
}

/// `H × W × 3` image in `[0, 1]`, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub depth: Option<Vec<f64>>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
            depth: None,
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dim {
                what: "raster data length",
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("raster value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            depth: None,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_dims(&self, other: &Raster) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "raster",
                &[self.height, self.width, 3],
                &[other.height, other.width, 3],
            ));
        }
        Ok(())
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.height * self.width, 3, self.data.clone())
    }

    pub fn bit_eq(&self, other: &Raster) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Header-less little-endian `f32` dump for lossless diffing.
    pub fn write_f32(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Places rasters side by side, left to right.
    pub fn hstack(parts: &[&Raster]) -> Result<Raster> {
        let first = parts.first().ok_or_else(|| Error::Contract("hstack of nothing".into()))?;
        let h = first.height;
        if parts.iter().any(|p| p.height != h) {
            return Err(Error::Contract("hstack needs equal heights".into()));
        }
        let w: usize = parts.iter().map(|p| p.width).sum();
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for p in parts {
                data.extend_from_slice(&p.data[r * p.width * 3..(r + 1) * p.width * 3]);
            }
        }
        Ok(Raster {
            height: h,
            width: w,
            data,
            depth: None,
        })
    }
}

/// Which vertex owns each pixel, and its depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub owner: Vec<Option<usize>>,
    pub depth: Vec<f64>,
}

impl Assignment {
    /// Gather indices into `colors` extended with a trailing background row.
    pub fn gather_index(&self, vertex_count: usize) -> Arc<Vec<usize>> {
        Arc::new(self.owner.iter().map(|o| o.unwrap_or(vertex_count)).collect())
    }
}

/// `vertices` is `V × 3` and must be finite.
pub fn rasterize(vertices: &Tensor, cam: &Camera) -> Result<Assignment> {
    if !vertices.is_matrix() || vertices.cols() != 3 {
        return Err(Error::Dim {
            what: "vertex columns",
            expected: 3,
            actual: vertices.shape().last().copied().unwrap_or(0),
        });
    }
    let points: Vec<[f64; 3]> = (0..vertices.rows())
        .map(|v| {
            let p = vertices.row(v);
            [p[0], p[1], p[2]]
        })
        .collect();
    rasterize_points(&points, cam)
}

pub fn rasterize_points(points: &[[f64; 3]], cam: &Camera) -> Result<Assignment> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("vertices passed to the renderer".into()));
    }
    let n = cam.pixels();
    let mut owner = vec![None; n];
    let mut depth = vec![f64::INFINITY; n];
    let r = cam.splat_radius;
    let r2 = r * r;
    for (v, &p) in points.iter().enumerate() {
        let (px, py, z) = cam.project(p);
        let c0 = ((px - r - 0.5).ceil().max(0.0)) as usize;
        let c1 = (px + r - 0.5).floor();
        let r0 = ((py - r - 0.5).ceil().max(0.0)) as usize;
        let r1 = (py + r - 0.5).floor();
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let c1 = (c1 as usize).min(cam.width - 1);
        let r1 = (r1 as usize).min(cam.height - 1);
        for row in r0..=r1 {
            let dy = row as f64 + 0.5 - py;
            for col in c0..=c1 {
                let dx = col as f64 + 0.5 - px;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let i = row * cam.width + col;
                if z < depth[i] {
                    depth[i] = z;
                    owner[i] = Some(v);
                }
            }
        }
    }
    Ok(Assignment { owner, depth })
}

pub fn shade(assign: &Assignment, colors: &Tensor, cam: &Camera) -> Result<Raster> {
    let mut data = Vec::with_capacity(cam.pixels() * 3);
    for o in &assign.owner {
        match o {
            Some(v) => data.extend_from_slice(colors.row(*v)),
            None => data.extend_from_slice(&[BACKGROUND; 3]),
        }
    }
    let mut raster = Raster::from_data(cam.height, cam.width, data)?;
    raster.depth = Some(assign.depth.clone());
    Ok(raster)
}

pub fn render(state: &AvatarState, cam: &Camera) -> Result<Raster> {
    let assign = rasterize(&state.vertices, cam)?;
    shade(&assign, &state.colors, cam)
}

/// Differentiable shading under a fixed assignment: `HW × 3` pixel colors.
pub fn shade_on_tape(tape: &mut Tape, colors: Var, assign: &Assignment) -> Result<Var> {
    let v = tape.value(colors).rows();
    let bg = tape.constant(Tensor::full(&[1, 3], BACKGROUND));
    let ext = tape.concat_rows(&[colors, bg])?;
    tape.gather_rows(ext, assign.gather_index(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::front(16, 1.5).unwrap()
    }

    fn state(v: Vec<[f64; 3]>, c: Vec<[f64; 3]>) -> AvatarState {
        let n = v.len();
        AvatarState::new(
            Tensor::matrix(n, 3, v.into_iter().flatten().collect()),
            Tensor::matrix(n, 3, c.into_iter().flatten().collect()),
        )
        .unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let a = rasterize_points(&[], &cam()).unwrap();
        assert!(a.owner.iter().all(Option::is_none));
        let r = shade(&a, &Tensor::zeros(&[1, 3]), &cam()).unwrap();
        assert!(r.data.iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn center_vertex_paints_disc() {
        let r = render(&state(vec![[0.0; 3]], vec![[1.0, 0.0, 0.0]]), &cam()).unwrap();
        assert_eq!(r.pixel(7, 7), [1.0, 0.0, 0.0]);
        assert_eq!(r.pixel(8, 8), [1.0, 0.0, 0.0]);
        assert_eq!(r.pixel(0, 0), [BACKGROUND; 3]);
        let painted = (0..16 * 16).filter(|i| r.pixel(i / 16, i % 16) != [BACKGROUND; 3]).count();
        // The next ring of pixel centers sits at distance sqrt(2.5) > 1.5.
        assert_eq!(painted, 4);
    }

    #[test]
    fn nearer_vertex_wins_and_ties_go_low() {
        let near_last = state(
            vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.5]],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        );
        assert_eq!(render(&near_last, &cam()).unwrap().pixel(8, 8), [0.0, 1.0, 0.0]);
        let tie = state(vec![[0.0; 3], [0.0; 3]], vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(render(&tie, &cam()).unwrap().pixel(8, 8), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn offscreen_and_small_rasters() {
        let far = state(vec![[10.0, 10.0, 0.0], [-10.0, -10.0, 0.0]], vec![[0.0; 3]; 2]);
        let r = render(&far, &cam()).unwrap();
        assert!(r.data.iter().all(|&v| v == BACKGROUND));
        assert!(Camera::front(8, 1.0).is_err());
    }

    #[test]
    fn tape_shading_matches_direct() {
        let s = state(
            vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.1], [-0.4, 0.2, -0.2]],
            vec![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7], [0.4, 0.4, 0.0]],
        );
        let c = cam();
        let assign = rasterize(&s.vertices, &c).unwrap();
        let mut tape = Tape::new();
        let colors = tape.param(s.colors.clone());
        let px = shade_on_tape(&mut tape, colors, &assign).unwrap();
        assert_eq!(tape.value(px).data(), render(&s, &c).unwrap().data.as_slice());
    }

    #[test]
    fn ppm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let mut r = Raster::filled(16, 17, 0.0);
        r.data[0] = 1.0;
        r.write_ppm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P6\n17 16\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 16 * 17 * 3);
        assert_eq!(bytes[header.len()], 255);
    }
}
