//! Additive ellipsoid phantoms standing in for clinical volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Vec3, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
    /// Rotation about the z axis, radians.
    #[serde(default)]
    pub rotation: f64,
    /// Added to every voxel whose center lies inside; may be negative.
    pub intensity: f64,
}

impl Ellipsoid {
    pub fn new(center: Vec3, semi_axes: Vec3, rotation: f64, intensity: f64) -> Self {
        Ellipsoid {
            center,
            semi_axes,
            rotation,
            intensity,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        // rotate into the ellipsoid frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let [a, b, h] = self.semi_axes;
        (u / a).powi(2) + (v / b).powi(2) + (dz / h).powi(2) <= 1.0
    }

    fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |e: &Self| {
            [
                e.center[0], e.center[1], e.center[2], e.semi_axes[0], e.semi_axes[1],
                e.semi_axes[2], e.rotation, e.intensity,
            ]
        };
        let (a, b) = (key(self), key(other));
        a.iter()
            .zip(&b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomPreset {
    Abdomen,
    Chest,
}

impl std::str::FromStr for PhantomPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abdomen" => Ok(PhantomPreset::Abdomen),
            "chest" => Ok(PhantomPreset::Chest),
            other => Err(Error::config("phantom", format!("unknown preset `{other}`"))),
        }
    }
}

impl PhantomPreset {
    pub fn ellipsoids(self) -> Vec<Ellipsoid> {
        match self {
            PhantomPreset::Abdomen => abdomen(),
            PhantomPreset::Chest => chest(),
        }
    }
}

/// Body, liver, spleen, kidneys, spine, aorta, a gas pocket and two small
/// bright inserts.
fn abdomen() -> Vec<Ellipsoid> {
    vec![
        Ellipsoid::new([0.5, 0.5, 0.5], [0.40, 0.30, 0.40], 0.0, 0.40),
        Ellipsoid::new([0.37, 0.44, 0.52], [0.14, 0.10, 0.22], 0.35, 0.15),
        Ellipsoid::new([0.67, 0.42, 0.48], [0.06, 0.09, 0.15], -0.3, 0.12),
        Ellipsoid::new([0.36, 0.63, 0.44], [0.05, 0.065, 0.09], 0.4, 0.22),
        Ellipsoid::new([0.64, 0.63, 0.44], [0.05, 0.065, 0.09], -0.4, 0.22),
        Ellipsoid::new([0.5, 0.70, 0.5], [0.055, 0.05, 0.38], 0.0, 0.45),
        Ellipsoid::new([0.53, 0.60, 0.5], [0.022, 0.022, 0.36], 0.0, 0.25),
        Ellipsoid::new([0.52, 0.36, 0.62], [0.05, 0.035, 0.05], 0.2, -0.35),
        Ellipsoid::new([0.45, 0.34, 0.38], [0.025, 0.025, 0.025], 0.0, 0.45),
        Ellipsoid::new([0.60, 0.30, 0.58], [0.02, 0.03, 0.02], 0.0, 0.40),
    ]
}

/// Body, two lungs, heart, spine, a dark trachea and bright thin bronchial
/// tubes inside the lungs.
fn chest() -> Vec<Ellipsoid> {
    vec![
        Ellipsoid::new([0.5, 0.5, 0.5], [0.42, 0.30, 0.40], 0.0, 0.42),
        Ellipsoid::new([0.33, 0.48, 0.5], [0.12, 0.19, 0.32], 0.1, -0.36),
        Ellipsoid::new([0.67, 0.48, 0.5], [0.12, 0.19, 0.32], -0.1, -0.36),
        Ellipsoid::new([0.53, 0.44, 0.42], [0.09, 0.08, 0.11], 0.3, 0.10),
        Ellipsoid::new([0.5, 0.73, 0.5], [0.05, 0.05, 0.38], 0.0, 0.48),
        Ellipsoid::new([0.5, 0.40, 0.72], [0.02, 0.02, 0.17], 0.0, -0.38),
        Ellipsoid::new([0.33, 0.46, 0.55], [0.09, 0.012, 0.012], 0.5, 0.40),
        Ellipsoid::new([0.67, 0.46, 0.55], [0.09, 0.012, 0.012], -0.5, 0.40),
        Ellipsoid::new([0.31, 0.52, 0.40], [0.012, 0.012, 0.12], 0.0, 0.40),
        Ellipsoid::new([0.69, 0.52, 0.40], [0.012, 0.012, 0.12], 0.0, 0.40),
    ]
}

/// Sums the intensities of all ellipsoids containing each voxel center, then
/// clamps to `[0, 1]`.
pub fn render_ellipsoid_phantom(ellipsoids: &[Ellipsoid], spec: &GridSpec) -> Result<VoxelGrid> {
    if ellipsoids.is_empty() {
        return Err(Error::config("ellipsoids", "phantom needs at least one ellipsoid"));
    }
    if let Some(e) = ellipsoids.iter().find(|e| e.semi_axes.iter().any(|&a| !(a > 0.0))) {
        return Err(Error::config("semi_axes", format!("must be > 0, got {:?}", e.semi_axes)));
    }
    let mut sorted = ellipsoids.to_vec();
    sorted.sort_by(Ellipsoid::canonical_cmp);
    let mut out = spec.zeros();
    for (i, v) in out.data.iter_mut().enumerate() {
        let [x, y, z] = spec.coords(i);
        let p = spec.center(x, y, z);
        let sum: f64 = sorted
            .iter()
            .filter(|e| e.contains(p))
            .map(|e| e.intensity)
            .sum();
        *v = sum.clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn render_preset(preset: PhantomPreset, spec: &GridSpec) -> VoxelGrid {
    render_ellipsoid_phantom(&preset.ellipsoids(), spec).expect("presets are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::unit_cube([16, 16, 16]).unwrap()
    }

    #[test]
    fn membership_sum_and_clamp() {
        let s = spec();
        let one = [Ellipsoid::new([0.5; 3], [0.2; 3], 0.0, 0.3)];
        let v = render_ellipsoid_phantom(&one, &s).unwrap();
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert_eq!(v.get(8, 8, 8), 0.3);

        let two = [
            Ellipsoid::new([0.5; 3], [0.2; 3], 0.0, 0.7),
            Ellipsoid::new([0.5; 3], [0.1; 3], 0.0, 0.5),
        ];
        let v = render_ellipsoid_phantom(&two, &s).unwrap();
        assert_eq!(v.get(8, 8, 8), 1.0);
    }

    #[test]
    fn rotation_about_z() {
        let s = spec();
        let e = Ellipsoid::new([0.5; 3], [0.4, 0.08, 0.08], std::f64::consts::FRAC_PI_2, 1.0);
        let v = render_ellipsoid_phantom(&[e], &s).unwrap();
        // long axis now along y
        assert_eq!(v.get(8, 3, 8), 1.0);
        assert_eq!(v.get(3, 8, 8), 0.0);
    }

    #[test]
    fn order_independent() {
        let s = spec();
        let mut es = PhantomPreset::Abdomen.ellipsoids();
        let a = render_ellipsoid_phantom(&es, &s).unwrap();
        es.reverse();
        es.swap(1, 4);
        let b = render_ellipsoid_phantom(&es, &s).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn presets_are_bounded_and_structured() {
        let s = GridSpec::unit_cube([32, 32, 32]).unwrap();
        for preset in [PhantomPreset::Abdomen, PhantomPreset::Chest] {
            let v = render_preset(preset, &s);
            assert!(v.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let fg = v.data.iter().filter(|&&x| x > 0.05).count();
            assert!(fg > s.len() / 10 && fg < s.len() * 3 / 4, "{preset:?}: {fg}");
            assert_eq!(v.get(0, 0, 0), 0.0);
        }
        assert_eq!("chest".parse::<PhantomPreset>().unwrap(), PhantomPreset::Chest);
        assert!("knee".parse::<PhantomPreset>().is_err());
    }

    #[test]
    fn empty_spec_rejected() {
        assert!(render_ellipsoid_phantom(&[], &spec()).is_err());
    }
}
