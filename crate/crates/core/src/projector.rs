//! Parallel-beam ray-traced sinogram operator and its exact adjoint.
//!
//! The system matrix is built once per geometry by Siddon traversal: every
//! detector bin casts one ray through its center, and the matrix entry for a
//! voxel is the ray's intersection length with that voxel in mm. Forward
//! projection and backprojection both read the same stored lengths, so the
//! pair is adjoint up to floating-point summation order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::tensor::{Image, Sinogram};
use crate::volume::Metadata;

/// Backprojection accumulates this many angles per partial image before the
/// fixed-order merge. Fixing it keeps results independent of thread count.
const ADJOINT_GROUP: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorGeometry {
    pub num_angles: usize,
    pub num_bins: usize,
    pub bin_size: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub voxel_size: f64,
}

impl ProjectorGeometry {
    pub fn new(
        num_angles: usize,
        num_bins: usize,
        bin_size: f64,
        image_width: usize,
        image_height: usize,
        voxel_size: f64,
    ) -> Result<Self> {
        let geom = ProjectorGeometry {
            num_angles,
            num_bins,
            bin_size,
            image_width,
            image_height,
            voxel_size,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Bins as wide as a voxel, just enough of them to cover the image
    /// diagonal, with the bin count's parity matched to the image width so
    /// that axis-aligned rays pass through voxel centers.
    pub fn standard(image_width: usize, image_height: usize, voxel_size: f64, num_angles: usize) -> Result<Self> {
        let diag = ((image_width * image_width + image_height * image_height) as f64).sqrt();
        let mut num_bins = diag.ceil() as usize;
        if num_bins % 2 != image_width % 2 {
            num_bins += 1;
        }
        Self::new(num_angles, num_bins, voxel_size, image_width, image_height, voxel_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_angles == 0 || self.num_bins == 0 || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Geometry("all geometry counts must be positive".into()));
        }
        if !(self.bin_size > 0.0 && self.bin_size.is_finite() && self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Geometry("bin and voxel sizes must be positive".into()));
        }
        let diag = self.voxel_size * ((self.image_width.pow(2) + self.image_height.pow(2)) as f64).sqrt();
        if (self.num_bins as f64) * self.bin_size < diag * (1.0 - 1e-12) {
            return Err(Error::Geometry(format!(
                "detector span {} mm does not cover the image diagonal {diag:.3} mm",
                self.num_bins as f64 * self.bin_size
            )));
        }
        Ok(())
    }

    pub fn angle(&self, k: usize) -> f64 {
        k as f64 * std::f64::consts::PI / self.num_angles as f64
    }

    /// Signed distance of bin `b`'s center from the rotation axis, mm.
    pub fn bin_center(&self, b: usize) -> f64 {
        (b as f64 - (self.num_bins as f64 - 1.0) / 2.0) * self.bin_size
    }

    pub fn num_voxels(&self) -> usize {
        self.image_width * self.image_height
    }

    pub fn num_rays(&self) -> usize {
        self.num_angles * self.num_bins
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        if img.width() != self.image_width || img.height() != self.image_height {
            return Err(Error::Geometry(format!(
                "image is {}x{}, geometry expects {}x{}",
                img.width(),
                img.height(),
                self.image_width,
                self.image_height
            )));
        }
        if (img.voxel_size() - self.voxel_size).abs() > 1e-9 * self.voxel_size {
            return Err(Error::Geometry(format!(
                "image voxel size {} mm differs from geometry {} mm",
                img.voxel_size(),
                self.voxel_size
            )));
        }
        Ok(())
    }

    pub fn to_metadata(&self, meta: &mut Metadata) {
        meta.insert("num_angles".into(), self.num_angles.to_string());
        meta.insert("num_bins".into(), self.num_bins.to_string());
        meta.insert("bin_size_mm".into(), format_f64(self.bin_size));
        meta.insert("voxel_size_mm".into(), format_f64(self.voxel_size));
        meta.insert("image_width".into(), self.image_width.to_string());
        meta.insert("image_height".into(), self.image_height.to_string());
    }

    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        fn get<T: std::str::FromStr>(meta: &Metadata, key: &str) -> Result<T> {
            meta.get(key)
                .ok_or_else(|| Error::Format(format!("metadata key `{key}` missing")))?
                .parse()
                .map_err(|_| Error::Format(format!("metadata key `{key}` is not a number")))
        }
        Self::new(
            get(meta, "num_angles")?,
            get(meta, "num_bins")?,
            get(meta, "bin_size_mm")?,
            get(meta, "image_width")?,
            get(meta, "image_height")?,
            get(meta, "voxel_size_mm")?,
        )
    }
}

pub(crate) fn format_f64(v: f64) -> String {
    format!("{v}")
}

/// Disjoint angle subsets for ordered-subsets reconstruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPartition {
    assignment: Vec<Vec<usize>>,
}

impl SubsetPartition {
    /// Angle `i` goes to subset `i mod num_subsets`.
    pub fn interleaved(num_angles: usize, num_subsets: usize) -> Result<Self> {
        if num_subsets == 0 || num_subsets > num_angles {
            return Err(domain(format!(
                "cannot split {num_angles} angles into {num_subsets} subsets"
            )));
        }
        let assignment = (0..num_subsets)
            .map(|s| (s..num_angles).step_by(num_subsets).collect())
            .collect();
        Ok(SubsetPartition { assignment })
    }

    pub fn num_subsets(&self) -> usize {
        self.assignment.len()
    }

    pub fn subset(&self, index: usize) -> Result<&[usize]> {
        self.assignment
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| domain(format!("subset {index} out of range ({} subsets)", self.assignment.len())))
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.assignment
    }
}

/// A geometry together with its precomputed sparse system matrix.
#[derive(Clone, Debug)]
pub struct Projector {
    geom: ProjectorGeometry,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    lengths: Vec<f64>,
}

impl Projector {
    pub fn new(geom: ProjectorGeometry) -> Result<Self> {
        geom.validate()?;
        let rays: Vec<Vec<(u32, f64)>> = (0..geom.num_rays())
            .into_par_iter()
            .map(|ray| trace_ray(&geom, ray / geom.num_bins, ray % geom.num_bins))
            .collect();
        let nnz = rays.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(rays.len() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut lengths = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for ray in rays {
            for (c, l) in ray {
                cols.push(c);
                lengths.push(l);
            }
            row_ptr.push(cols.len());
        }
        Ok(Projector {
            geom,
            row_ptr,
            cols,
            lengths,
        })
    }

    pub fn geometry(&self) -> &ProjectorGeometry {
        &self.geom
    }

    /// Intersection entries `(voxel index, length mm)` of one ray.
    pub fn ray(&self, angle: usize, bin: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = angle * self.geom.num_bins + bin;
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.lengths[span])
            .map(|(&c, &l)| (c as usize, l))
    }

    fn project_angle(&self, angle: usize, x: &[f64], out: &mut [f64]) {
        let nb = self.geom.num_bins;
        for (b, o) in out.iter_mut().enumerate() {
            let r = angle * nb + b;
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            *o = self.cols[span.clone()]
                .iter()
                .zip(&self.lengths[span])
                .map(|(&c, &l)| l * x[c as usize])
                .sum();
        }
    }

    fn backproject_angle(&self, angle: usize, row: &[f64], acc: &mut [f64]) {
        let nb = self.geom.num_bins;
        for (b, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let r = angle * nb + b;
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for (&c, &l) in self.cols[span.clone()].iter().zip(&self.lengths[span]) {
                acc[c as usize] += l * v;
            }
        }
    }

    fn forward_angles(&self, angles: &[usize], img: &Image) -> Result<Sinogram> {
        self.geom.check_image(img)?;
        let nb = self.geom.num_bins;
        let mut data = vec![0.0; angles.len() * nb];
        data.par_chunks_mut(nb)
            .zip(angles.par_iter())
            .for_each(|(out, &a)| self.project_angle(a, img.data(), out));
        Sinogram::from_vec(angles.len(), nb, self.geom.bin_size, data)
    }

    fn adjoint_angles(&self, angles: &[usize], sino: &Sinogram) -> Result<Image> {
        if sino.num_angles() != angles.len() || sino.num_bins() != self.geom.num_bins {
            return Err(Error::Geometry(format!(
                "sinogram is {}x{}, expected {}x{}",
                sino.num_angles(),
                sino.num_bins(),
                angles.len(),
                self.geom.num_bins
            )));
        }
        let k = self.geom.num_voxels();
        let partials: Vec<Vec<f64>> = angles
            .par_chunks(ADJOINT_GROUP)
            .enumerate()
            .map(|(g, group)| {
                let mut acc = vec![0.0; k];
                for (i, &a) in group.iter().enumerate() {
                    self.backproject_angle(a, sino.row(g * ADJOINT_GROUP + i), &mut acc);
                }
                acc
            })
            .collect();
        let mut parts = partials.into_iter();
        let mut out = parts.next().unwrap_or_else(|| vec![0.0; k]);
        for p in parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Image::from_vec(self.geom.image_width, self.geom.image_height, self.geom.voxel_size, out)
    }

    pub fn forward(&self, img: &Image) -> Result<Sinogram> {
        let all: Vec<usize> = (0..self.geom.num_angles).collect();
        self.forward_angles(&all, img)
    }

    pub fn adjoint(&self, sino: &Sinogram) -> Result<Image> {
        let all: Vec<usize> = (0..self.geom.num_angles).collect();
        self.adjoint_angles(&all, sino)
    }

    /// Rows of the full forward projection for the subset's angles, in subset order.
    pub fn forward_subset(&self, partition: &SubsetPartition, subset_index: usize, img: &Image) -> Result<Sinogram> {
        self.check_partition(partition)?;
        self.forward_angles(partition.subset(subset_index)?, img)
    }

    pub fn adjoint_subset(&self, partition: &SubsetPartition, subset_index: usize, sino: &Sinogram) -> Result<Image> {
        self.check_partition(partition)?;
        self.adjoint_angles(partition.subset(subset_index)?, sino)
    }

    /// Gathers the rows of a full sinogram belonging to one subset.
    pub fn restrict(&self, partition: &SubsetPartition, subset_index: usize, sino: &Sinogram) -> Result<Sinogram> {
        let angles = partition.subset(subset_index)?;
        let mut data = Vec::with_capacity(angles.len() * sino.num_bins());
        for &a in angles {
            data.extend_from_slice(sino.row(a));
        }
        Sinogram::from_vec(angles.len(), sino.num_bins(), sino.bin_size(), data)
    }

    fn check_partition(&self, partition: &SubsetPartition) -> Result<()> {
        let total: usize = partition.subsets().iter().map(Vec::len).sum();
        if total != self.geom.num_angles {
            return Err(Error::Geometry(format!(
                "partition covers {total} angles, geometry has {}",
                self.geom.num_angles
            )));
        }
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

/// Siddon traversal of the ray for (`angle`, `bin`): returns voxel indices
/// with the ray's intersection length through each, in traversal order.
fn trace_ray(geom: &ProjectorGeometry, angle: usize, bin: usize) -> Vec<(u32, f64)> {
    let theta = geom.angle(angle);
    let (sin, cos) = theta.sin_cos();
    let s = geom.bin_center(bin);
    let vs = geom.voxel_size;
    let (w, h) = (geom.image_width, geom.image_height);
    let half_w = w as f64 * vs / 2.0;
    let half_h = h as f64 * vs / 2.0;

    // p(t) = s*(cos, sin) + t*(-sin, cos)
    let (px, py) = (s * cos, s * sin);
    let (dx, dy) = (-sin, cos);
    const PARALLEL: f64 = 1e-12;

    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for (p, d, half) in [(px, dx, half_w), (py, dy, half_h)] {
        if d.abs() < PARALLEL {
            if p < -half || p > half {
                return Vec::new();
            }
        } else {
            let a = (-half - p) / d;
            let b = (half - p) / d;
            t_lo = t_lo.max(a.min(b));
            t_hi = t_hi.min(a.max(b));
        }
    }
    if t_hi - t_lo <= 0.0 {
        return Vec::new();
    }

    let mut ts = Vec::with_capacity(w + h + 4);
    ts.push(t_lo);
    ts.push(t_hi);
    for (p, d, n, half) in [(px, dx, w, half_w), (py, dy, h, half_h)] {
        if d.abs() < PARALLEL {
            continue;
        }
        for i in 0..=n {
            let t = (-half + i as f64 * vs - p) / d;
            if t > t_lo && t < t_hi {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let min_len = 1e-12 * vs;
    let mut out = Vec::with_capacity(ts.len());
    for pair in ts.windows(2) {
        let len = pair[1] - pair[0];
        if len <= min_len {
            continue;
        }
        let tm = 0.5 * (pair[0] + pair[1]);
        let x = px + tm * dx;
        let y = py + tm * dy;
        let col = (((x + half_w) / vs).floor() as isize).clamp(0, w as isize - 1) as usize;
        let row = (((half_h - y) / vs).floor() as isize).clamp(0, h as isize - 1) as usize;
        let idx = (row * w + col) as u32;
        match out.last_mut() {
            Some((last, l)) if *last == idx => *l += len,
            _ => out.push((idx, len)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(geom: &ProjectorGeometry, rng: &mut Rng) -> Image {
        let data = (0..geom.num_voxels()).map(|_| rng.normal()).collect();
        Image::from_vec(geom.image_width, geom.image_height, geom.voxel_size, data).unwrap()
    }

    fn random_sino(geom: &ProjectorGeometry, rng: &mut Rng) -> Sinogram {
        let data = (0..geom.num_rays()).map(|_| rng.normal()).collect();
        Sinogram::from_vec(geom.num_angles, geom.num_bins, geom.bin_size, data).unwrap()
    }

    #[test]
    fn geometry_rejects_insufficient_coverage() {
        assert!(ProjectorGeometry::new(10, 10, 1.0, 16, 16, 1.0).is_err());
        assert!(ProjectorGeometry::new(10, 23, 1.0, 16, 16, 1.0).is_ok());
    }

    #[test]
    fn standard_geometry_parity() {
        let g = ProjectorGeometry::standard(128, 128, 2.0, 180).unwrap();
        assert_eq!(g.num_bins, 182);
        let g = ProjectorGeometry::standard(9, 9, 1.0, 4).unwrap();
        assert_eq!(g.num_bins % 2, 1);
    }

    #[test]
    fn zero_in_zero_out() {
        let g = ProjectorGeometry::standard(16, 16, 2.0, 12).unwrap();
        let p = Projector::new(g.clone()).unwrap();
        let z = Image::new(16, 16, 2.0, 0.0).unwrap();
        assert!(p.forward(&z).unwrap().data().iter().all(|&v| v == 0.0));
        let zs = Sinogram::zeros(12, g.num_bins, g.bin_size).unwrap();
        assert!(p.adjoint(&zs).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_center_voxel_path_lengths() {
        // 9x9 grid, odd bin count: the central bin's ray crosses the center voxel.
        let g = ProjectorGeometry::standard(9, 9, 2.0, 8).unwrap();
        let p = Projector::new(g.clone()).unwrap();
        let mut img = Image::new(9, 9, 2.0, 0.0).unwrap();
        img.set(4, 4, 1.0);
        let sino = p.forward(&img).unwrap();
        let center = (g.num_bins - 1) / 2;
        for a in 0..g.num_angles {
            let theta = g.angle(a);
            // Chord of a square of side 2 mm through its center at angle theta.
            let expected = 2.0 / theta.cos().abs().max(theta.sin().abs());
            let got = sino.get(a, center);
            assert!((got - expected).abs() < 1e-9, "angle {a}: {got} vs {expected}");
            assert!(got <= 2.0 * 2f64.sqrt() + 1e-12);
        }
        assert!((sino.get(0, center) - 2.0).abs() < 1e-12);
        assert!((sino.get(2, center) - 2.0 * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn ray_lengths_sum_to_chord_of_image_box() {
        let g = ProjectorGeometry::standard(10, 10, 1.0, 7).unwrap();
        let p = Projector::new(g.clone()).unwrap();
        // Through the image center at angle 0 the chord is the full height.
        let total: f64 = p.ray(0, (g.num_bins - 1) / 2).map(|(_, l)| l).sum();
        assert!((total - 10.0).abs() < 1e-9);
    }

    #[test]
    fn adjoint_dot_product_small() {
        let g = ProjectorGeometry::standard(24, 20, 1.5, 17).unwrap();
        let p = Projector::new(g.clone()).unwrap();
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let x = random_image(&g, &mut rng);
            let y = random_sino(&g, &mut rng);
            let sx = p.forward(&x).unwrap();
                let lhs = sx.dot(&y);
            let rhs = x.dot(&p.adjoint(&y).unwrap());
            let norm = sx.dot(&sx).sqrt() * y.dot(&y).sqrt();
            assert!((lhs - rhs).abs() / norm <= 1e-10);
        }
    }

    #[test]
    fn all_ones_backprojection_positive_in_fov() {
        let g = ProjectorGeometry::standard(32, 32, 2.0, 30).unwrap();
        let p = Projector::new(g.clone()).unwrap();
        let ones = Sinogram::from_vec(30, g.num_bins, g.bin_size, vec![1.0; g.num_rays()]).unwrap();
        let bp = p.adjoint(&ones).unwrap();
        assert!(bp.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn partition_rules() {
        let part = SubsetPartition::interleaved(60, 20).unwrap();
        for (s, angles) in part.subsets().iter().enumerate() {
            assert_eq!(angles, &vec![s, s + 20, s + 40]);
        }
        let uneven = SubsetPartition::interleaved(10, 3).unwrap();
        let sizes: Vec<usize> = uneven.subsets().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert!(SubsetPartition::interleaved(10, 0).is_err());
        assert!(SubsetPartition::interleaved(10, 11).is_err());
        assert!(uneven.subset(3).is_err());
    }

    #[test]
    fn subset_projections_match_full_rows() {
        let g = ProjectorGeometry::standard(16, 16, 2.0, 12).unwrap();
        let p = Projector::new(g.clone()).unwrap();
        let mut rng = Rng::new(5);
        let x = random_image(&g, &mut rng);
        let full = p.forward(&x).unwrap();

        let one = SubsetPartition::interleaved(12, 1).unwrap();
        assert_eq!(p.forward_subset(&one, 0, &x).unwrap(), full);

        let part = SubsetPartition::interleaved(12, 5).unwrap();
        let mut rebuilt = vec![0.0; full.len()];
        for s in 0..part.num_subsets() {
            let sub = p.forward_subset(&part, s, &x).unwrap();
            for (i, &a) in part.subset(s).unwrap().iter().enumerate() {
                rebuilt[a * g.num_bins..(a + 1) * g.num_bins].copy_from_slice(sub.row(i));
            }
        }
        assert_eq!(rebuilt, full.data());
        assert!(p.forward_subset(&part, 5, &x).is_err());

        let y = random_sino(&g, &mut rng);
        let mut summed = vec![0.0; g.num_voxels()];
        for s in 0..part.num_subsets() {
            let ys = p.restrict(&part, s, &y).unwrap();
            let bp = p.adjoint_subset(&part, s, &ys).unwrap();
            for (o, v) in summed.iter_mut().zip(bp.data()) {
                *o += v;
            }
        }
        let full_bp = p.adjoint(&y).unwrap();
        for (a, b) in summed.iter().zip(full_bp.data()) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn shape_mismatch_is_geometry_error() {
        let g = ProjectorGeometry::standard(16, 16, 2.0, 12).unwrap();
        let p = Projector::new(g).unwrap();
        let wrong = Image::new(8, 8, 2.0, 1.0).unwrap();
        assert!(matches!(p.forward(&wrong), Err(Error::Geometry(_))));
        let wrong_s = Sinogram::zeros(11, 3, 2.0).unwrap();
        assert!(matches!(p.adjoint(&wrong_s), Err(Error::Geometry(_))));
    }

    #[test]
    fn metadata_round_trip() {
        let g = ProjectorGeometry::standard(64, 64, 2.0, 90).unwrap();
        let mut meta = Metadata::new();
        g.to_metadata(&mut meta);
        assert_eq!(ProjectorGeometry::from_metadata(&meta).unwrap(), g);
    }
}
