//! Pinhole camera, z-buffer depth rasterization, depth back-projection with
//! screen-space normals, camera rigs, and 16-bit PNG depth IO.

use crate::geometry::{GeometryError, OrientedPointCloud, TriMesh};
use crate::math::{self, Mat3, Vec3};
use std::path::Path;

pub const DEPTH_RES: usize = 512;
/// Depth gradient (meters per pixel) beyond which a pixel is treated as an
/// occlusion boundary and dropped from back-projection.
pub const DEPTH_EDGE_LIMIT: f64 = 0.05;

/// Pinhole camera: `p_cam = rot * p_world + t`, image axes x right / y down,
/// looking along +z.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: Mat3,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking toward `target` with the given up hint.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64) -> Camera {
        let forward = math::normalize(math::sub(target, eye));
        let right = math::normalize(math::cross(forward, up));
        let down = math::cross(forward, right);
        let rot = Mat3 {
            m: [right, down, forward],
        };
        Camera {
            fx: focal,
            fy: focal,
            cx: DEPTH_RES as f64 / 2.0,
            cy: DEPTH_RES as f64 / 2.0,
            rot,
            t: math::scale(rot.mul_vec(eye), -1.0),
            width: DEPTH_RES,
            height: DEPTH_RES,
        }
    }

    pub fn position(&self) -> Vec3 {
        math::scale(self.rot.tr_mul_vec(self.t), -1.0)
    }

    pub fn to_camera(&self, p_world: Vec3) -> Vec3 {
        math::add(self.rot.mul_vec(p_world), self.t)
    }

    /// Screen coordinates and camera-space depth; `None` behind the camera.
    pub fn project(&self, p_world: Vec3) -> Option<(f64, f64, f64)> {
        let p = self.to_camera(p_world);
        if p[2] <= 1e-9 {
            return None;
        }
        Some((
            self.cx + self.fx * p[0] / p[2],
            self.cy + self.fy * p[1] / p[2],
            p[2],
        ))
    }

    /// World point of pixel (u, v) at the given camera-space depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let p_cam = [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ];
        self.rot.tr_mul_vec(math::sub(p_cam, self.t))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("camera serializes"),
        )?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Camera, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| GeometryError::Parse(e.to_string()))
    }
}

/// Depth image in meters; 0 marks background / invalid.
#[derive(Clone, Debug)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    /// 16-bit grayscale PNG, millimeters, 0 invalid.
    pub fn write_png(&self, path: &Path) -> Result<(), GeometryError> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc
            .write_header()
            .map_err(|e| GeometryError::Parse(e.to_string()))?;
        let mut buf = Vec::with_capacity(self.data.len() * 2);
        for &d in &self.data {
            let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
            buf.extend_from_slice(&mm.to_be_bytes());
        }
        writer
            .write_image_data(&buf)
            .map_err(|e| GeometryError::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<DepthImage, GeometryError> {
        let file = std::fs::File::open(path)?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| GeometryError::Parse(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| GeometryError::Parse(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
            return Err(GeometryError::Parse("expected 16-bit grayscale depth png".into()));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h);
        for px in buf[..w * h * 2].chunks_exact(2) {
            let mm = u16::from_be_bytes([px[0], px[1]]);
            data.push(mm as f64 / 1000.0);
        }
        Ok(DepthImage {
            width: w,
            height: h,
            data,
        })
    }
}

/// Z-buffer rasterization with perspective-correct depth.
pub fn render_depth(mesh: &TriMesh, camera: &Camera) -> DepthImage {
    let mut depth = DepthImage {
        width: camera.width,
        height: camera.height,
        data: vec![0.0; camera.width * camera.height],
    };
    for face in 0..mesh.faces.len() {
        let verts = mesh.face_vertices(face);
        let Some(p0) = camera.project(verts[0]) else { continue };
        let Some(p1) = camera.project(verts[1]) else { continue };
        let Some(p2) = camera.project(verts[2]) else { continue };
        let min_x = p0.0.min(p1.0).min(p2.0).floor().max(0.0) as usize;
        let max_x = (p0.0.max(p1.0).max(p2.0).ceil() as usize).min(camera.width - 1);
        let min_y = p0.1.min(p1.1).min(p2.1).floor().max(0.0) as usize;
        let max_y = (p0.1.max(p1.1).max(p2.1).ceil() as usize).min(camera.height - 1);
        if min_x > max_x || min_y > max_y {
            continue;
        }
        let area = (p1.0 - p0.0) * (p2.1 - p0.1) - (p1.1 - p0.1) * (p2.0 - p0.0);
        if area.abs() < 1e-12 {
            continue;
        }
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let w0 = ((p1.0 - x) * (p2.1 - y) - (p1.1 - y) * (p2.0 - x)) / area;
                let w1 = ((p2.0 - x) * (p0.1 - y) - (p2.1 - y) * (p0.0 - x)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 / p0.2 + w1 / p1.2 + w2 / p2.2;
                let z = 1.0 / inv_z;
                let cell = &mut depth.data[py * camera.width + px];
                if *cell == 0.0 || z < *cell {
                    *cell = z;
                }
            }
        }
    }
    depth
}

/// Back-projects foreground pixels to a world-space oriented cloud. Normals
/// come from central differences of the unprojected neighbors; pixels at
/// occlusion boundaries (large depth gradient or missing neighbors) are
/// dropped, and normals are oriented toward the camera.
pub fn backproject(depth: &DepthImage, camera: &Camera) -> OrientedPointCloud {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let cam_pos = camera.position();
    let (w, h) = (depth.width, depth.height);
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let d = depth.get(u, v);
            if d == 0.0 {
                continue;
            }
            let (dl, dr) = (depth.get(u - 1, v), depth.get(u + 1, v));
            let (du, dd) = (depth.get(u, v - 1), depth.get(u, v + 1));
            if dl == 0.0 || dr == 0.0 || du == 0.0 || dd == 0.0 {
                continue;
            }
            if (dr - dl).abs() * 0.5 > DEPTH_EDGE_LIMIT || (dd - du).abs() * 0.5 > DEPTH_EDGE_LIMIT {
                continue;
            }
            let p = camera.unproject(u as f64 + 0.5, v as f64 + 0.5, d);
            let px = math::sub(
                camera.unproject(u as f64 + 1.5, v as f64 + 0.5, dr),
                camera.unproject(u as f64 - 0.5, v as f64 + 0.5, dl),
            );
            let py = math::sub(
                camera.unproject(u as f64 + 0.5, v as f64 + 1.5, dd),
                camera.unproject(u as f64 + 0.5, v as f64 - 0.5, du),
            );
            let Some(mut n) = math::try_normalize(math::cross(px, py)) else {
                continue;
            };
            if math::dot(n, math::sub(cam_pos, p)) < 0.0 {
                n = math::scale(n, -1.0);
            }
            points.push(p);
            normals.push(n);
        }
    }
    OrientedPointCloud::new(points, normals).expect("backprojection normals are unit")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RigMode {
    Static,
    Orbit,
}

impl RigMode {
    pub fn parse(s: &str) -> Option<RigMode> {
        match s {
            "static" => Some(RigMode::Static),
            "orbit" => Some(RigMode::Orbit),
            _ => None,
        }
    }
}

/// Camera for orbit frame `i` of `l`: azimuth steps of 360/l degrees around
/// the +Y axis through `center`.
pub fn orbit_camera(center: Vec3, distance: f64, focal: f64, i: usize, l: usize) -> Camera {
    let az = 2.0 * std::f64::consts::PI * i as f64 / l as f64;
    let eye = math::add(center, [distance * az.sin(), 0.0, distance * az.cos()]);
    Camera::look_at(eye, center, [0.0, 1.0, 0.0], focal)
}

/// Static front-facing rig or an orbit with one view every 360/l degrees.
pub fn camera_rig(mode: RigMode, l: usize, center: Vec3, distance: f64, focal: f64) -> Vec<Camera> {
    (0..l)
        .map(|i| match mode {
            RigMode::Static => Camera::look_at(
                math::add(center, [0.0, 0.0, distance]),
                center,
                [0.0, 1.0, 0.0],
                focal,
            ),
            RigMode::Orbit => orbit_camera(center, distance, focal, i, l),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_center_pixel_depth() {
        let sphere = TriMesh::uv_sphere([0.0, 0.0, 0.0], 0.3, 48, 64);
        let cam = Camera::look_at([0.0, 0.0, -2.0], [0.0; 3], [0.0, 1.0, 0.0], 500.0);
        let depth = render_depth(&sphere, &cam);
        let center = depth.get(256, 256);
        assert!((center - 1.7).abs() < 2e-3, "depth {center}");
    }

    #[test]
    fn empty_and_behind_camera_render_background() {
        let sphere = TriMesh::uv_sphere([0.0, 0.0, 5.0], 0.3, 8, 12);
        let cam = Camera::look_at([0.0, 0.0, -1.0], [0.0, 0.0, -5.0], [0.0, 1.0, 0.0], 500.0);
        // sphere is behind this camera
        let depth = render_depth(&sphere, &cam);
        assert!(depth.data.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn plane_backprojection_round_trip() {
        // large quad at z = 1.5 facing the camera
        let quad = TriMesh::new(
            vec![
                [-1.0, -1.0, 1.5],
                [1.0, -1.0, 1.5],
                [1.0, 1.0, 1.5],
                [-1.0, 1.0, 1.5],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 400.0);
        let depth = render_depth(&quad, &cam);
        let cloud = backproject(&depth, &cam);
        assert!(!cloud.is_empty());
        for (p, n) in cloud.points.iter().zip(&cloud.normals) {
            assert!((p[2] - 1.5).abs() < 1e-6, "point {p:?}");
            // plane normal is -z (toward camera)
            let angle = math::dot(*n, [0.0, 0.0, -1.0]).clamp(-1.0, 1.0).acos();
            assert!(angle < 1f64.to_radians(), "normal {n:?}");
        }
    }

    #[test]
    fn single_pixel_depth_unprojects_once() {
        let mut depth = DepthImage {
            width: 8,
            height: 8,
            data: vec![0.0; 64],
        };
        depth.data[3 * 8 + 4] = 2.0;
        let cam = Camera {
            fx: 10.0,
            fy: 10.0,
            cx: 4.0,
            cy: 4.0,
            rot: Mat3::IDENTITY,
            t: [0.0; 3],
            width: 8,
            height: 8,
        };
        // isolated pixel has no valid neighbors, so normals cannot be
        // estimated and it is dropped; fill its neighborhood instead
        for v in 2..5 {
            for u in 3..6 {
                depth.data[v * 8 + u] = 2.0;
            }
        }
        let cloud = backproject(&depth, &cam);
        assert_eq!(cloud.len(), 1);
        let expect = cam.unproject(4.5, 3.5, 2.0);
        assert!(math::dist(cloud.points[0], expect) < 1e-12);
    }

    #[test]
    fn empty_depth_gives_empty_cloud() {
        let depth = DepthImage {
            width: 16,
            height: 16,
            data: vec![0.0; 256],
        };
        let cam = Camera::look_at([0.0; 3], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 10.0);
        assert!(backproject(&depth, &cam).is_empty());
    }

    #[test]
    fn orbit_rig_spacing_and_periodicity() {
        let l = 17;
        let rig = camera_rig(RigMode::Orbit, l, [0.0; 3], 1.5, 400.0);
        for i in 1..l {
            let a = rig[i - 1].position();
            let b = rig[i].position();
            let angle = math::dot(math::normalize(a), math::normalize(b)).clamp(-1.0, 1.0).acos();
            let expect = 2.0 * std::f64::consts::PI / l as f64;
            assert!((angle - expect).abs() < 1e-12);
        }
        let wrapped = orbit_camera([0.0; 3], 1.5, 400.0, l, l);
        assert!(math::dist(wrapped.position(), rig[0].position()) < 1e-9);
        let statics = camera_rig(RigMode::Static, 3, [0.0; 3], 1.5, 400.0);
        for c in &statics[1..] {
            assert!(math::dist(c.position(), statics[0].position()) < 1e-15);
        }
    }

    #[test]
    fn depth_png_round_trip() {
        let mut depth = DepthImage {
            width: 32,
            height: 16,
            data: vec![0.0; 512],
        };
        for (i, d) in depth.data.iter_mut().enumerate() {
            *d = (i % 7) as f64 * 0.25;
        }
        let dir = std::env::temp_dir().join("local4d_depth_io");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.png");
        depth.write_png(&path).unwrap();
        let back = DepthImage::read_png(&path).unwrap();
        assert_eq!(back.width, 32);
        for (a, b) in depth.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 5e-4, "{a} vs {b}"); // mm quantization
        }
    }
}
