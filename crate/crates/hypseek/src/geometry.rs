//! Lorentz-model primitives: inner product, lift, exponential map, geodesic
//! distance, exterior angle and cone aperture.
//!
//! Points live on the upper sheet of the two-sheeted hyperboloid in
//! R^{n+1}: `<p, p>_L = -1/kappa` with `p_0 > 0`, where
//! `<p, q>_L = -p_0 q_0 + <p~, q~>` is the Lorentzian inner product and
//! the space has constant curvature `-kappa`.
//!
//! Numerical notes, all load-bearing:
//!
//! * The time coordinate is always materialized as
//!   `sqrt(1/kappa + ||spatial||^2)` (the hyperboloid constraint solved for
//!   `p_0`), never via `cosh`. Membership is then checked with the factored
//!   residual `(t - h)(t + h)` against the same expression, so points built
//!   by [`lift_spatial`] or [`exp_map_origin`] verify exactly even at large
//!   radius, where the naive `t^2 - ||s||^2 - 1/kappa` drowns in rounding.
//! * Geodesic distance uses the chord identity
//!   `-kappa <p,q>_L = 1 + (kappa/2) (||dp~||^2 - dt^2)` on coordinate
//!   differences plus `acosh(1 + x) = ln_1p(x + sqrt(x (x + 2)))`. The
//!   direct `acosh(-kappa <p,q>_L)` route loses half the working precision
//!   for nearby points.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("curvature must be positive and finite, got {0}")]
    InvalidCurvature(f64),
    #[error("point is off the hyperboloid (membership residual {residual:.3e})")]
    OffManifold { residual: f64 },
    #[error("pocket at the origin: exterior angle and aperture are undefined")]
    PocketAtOrigin,
    #[error("coincident points: exterior angle is undefined")]
    CoincidentPoints,
}

/// Curvature parameter `kappa > 0`; the space has curvature `-kappa`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature {
    kappa: f64,
}

impl Curvature {
    pub fn new(kappa: f64) -> Result<Self, GeometryError> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(GeometryError::InvalidCurvature(kappa));
        }
        Ok(Self { kappa })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn sqrt_kappa(&self) -> f64 {
        self.kappa.sqrt()
    }

    /// Time coordinate of the hyperboloid origin, `1/sqrt(kappa)`.
    ///
    /// Written as `sqrt(1/kappa)` so it agrees bit-for-bit with the lift of
    /// the zero vector.
    pub fn origin_time(&self) -> f64 {
        (1.0 / self.kappa).sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self { kappa: 1.0 }
    }
}

/// A point on the hyperboloid: time coordinate `p_0` plus spatial part `p~`.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    time: f64,
    spatial: Vec<f64>,
}

/// Residual tolerance accepted by operations that require on-manifold input.
pub const MEMBERSHIP_TOL: f64 = 1e-6;

/// Tangent-norm threshold below which `sinh(x)/x` switches to its series.
const EXP_MAP_TAYLOR_EPS: f64 = 1e-8;

/// Minimum spatial norm for a pocket to define a cone.
const POCKET_ORIGIN_EPS: f64 = 1e-8;

/// Minimum geodesic separation for the exterior angle to be defined.
const COINCIDENT_EPS: f64 = 1e-8;

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl LorentzPoint {
    /// Validates membership (residual within `tol`) before accepting the
    /// coordinates.
    pub fn new(
        time: f64,
        spatial: Vec<f64>,
        curvature: Curvature,
        tol: f64,
    ) -> Result<Self, GeometryError> {
        if !time.is_finite() || spatial.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let p = Self { time, spatial };
        let residual = membership_residual(&p, curvature);
        if time <= 0.0 || residual.abs() > tol {
            return Err(GeometryError::OffManifold { residual });
        }
        Ok(p)
    }

    /// Coordinates as given, with no membership check. For test fixtures and
    /// trusted constructors only.
    pub fn from_parts_unchecked(time: f64, spatial: Vec<f64>) -> Self {
        Self { time, spatial }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn spatial(&self) -> &[f64] {
        &self.spatial
    }

    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial_norm(&self) -> f64 {
        sq_norm(&self.spatial).sqrt()
    }

    /// The base point `(1/sqrt(kappa), 0, ..., 0)`.
    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self {
            time: curvature.origin_time(),
            spatial: vec![0.0; dim],
        }
    }

    /// Full ambient coordinate vector `(p_0, p~)`.
    pub fn ambient(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.spatial.len() + 1);
        v.push(self.time);
        v.extend_from_slice(&self.spatial);
        v
    }
}

/// A tangent vector at the origin. Its time component is identically zero
/// (`<origin, v>_L = 0` forces `v_0 = 0`), so only the spatial part is stored;
/// the Lorentz norm equals the Euclidean norm of that part.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentAtOrigin {
    spatial: Vec<f64>,
}

impl TangentAtOrigin {
    pub fn new(spatial: Vec<f64>) -> Result<Self, GeometryError> {
        if spatial.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { spatial })
    }

    pub fn spatial(&self) -> &[f64] {
        &self.spatial
    }

    pub fn norm(&self) -> f64 {
        sq_norm(&self.spatial).sqrt()
    }
}

/// Membership residual `t^2 - ||s||^2 - 1/kappa`, evaluated in the factored
/// form `(t - h)(t + h)` with `h = sqrt(1/kappa + ||s||^2)`.
///
/// Points whose time coordinate was produced by the same expression (the lift
/// and the exponential map) yield a residual of exactly zero, so the check
/// stays meaningful at radii where the direct difference of squares would be
/// dominated by representation error.
pub fn membership_residual(p: &LorentzPoint, curvature: Curvature) -> f64 {
    let h = (1.0 / curvature.kappa() + sq_norm(&p.spatial)).sqrt();
    (p.time - h) * (p.time + h)
}

/// Lorentzian inner product `-p_0 q_0 + <p~, q~>` of raw ambient vectors.
pub fn lorentz_inner_raw(p: &[f64], q: &[f64]) -> Result<f64, GeometryError> {
    if p.len() != q.len() {
        return Err(GeometryError::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.is_empty() {
        return Err(GeometryError::DimensionMismatch { left: 0, right: 0 });
    }
    let mut acc = -p[0] * q[0];
    for i in 1..p.len() {
        acc += p[i] * q[i];
    }
    Ok(acc)
}

/// Lorentzian inner product of two points.
pub fn lorentz_inner(p: &LorentzPoint, q: &LorentzPoint) -> Result<f64, GeometryError> {
    if p.dim() != q.dim() {
        return Err(GeometryError::DimensionMismatch {
            left: p.dim(),
            right: q.dim(),
        });
    }
    let mut acc = -p.time * q.time;
    for (a, b) in p.spatial.iter().zip(q.spatial.iter()) {
        acc += a * b;
    }
    Ok(acc)
}

/// Lifts a spatial vector onto the hyperboloid:
/// `(sqrt(1/kappa + ||s||^2), s)`.
pub fn lift_spatial(spatial: &[f64], curvature: Curvature) -> Result<LorentzPoint, GeometryError> {
    if spatial.iter().any(|x| !x.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let time = (1.0 / curvature.kappa() + sq_norm(spatial)).sqrt();
    Ok(LorentzPoint {
        time,
        spatial: spatial.to_vec(),
    })
}

/// Exponential map at the origin:
/// `cosh(sqrt(kappa) ||v||) * o + sinh(sqrt(kappa) ||v||) / (sqrt(kappa) ||v||) * v`.
///
/// The spatial part is `sinh(a)/a * v` with `a = sqrt(kappa) ||v||`; for
/// `||v|| < 1e-8` the removable singularity is bridged with
/// `sinh(a)/a ~= 1 + a^2/6`. The time coordinate is re-derived from the
/// spatial part via the hyperboloid constraint (see module notes).
pub fn exp_map_origin(v: &TangentAtOrigin, curvature: Curvature) -> LorentzPoint {
    let norm = v.norm();
    let a = curvature.sqrt_kappa() * norm;
    let coeff = if norm < EXP_MAP_TAYLOR_EPS {
        1.0 + a * a / 6.0
    } else {
        a.sinh() / a
    };
    let spatial: Vec<f64> = v.spatial.iter().map(|x| coeff * x).collect();
    let time = (1.0 / curvature.kappa() + sq_norm(&spatial)).sqrt();
    LorentzPoint { time, spatial }
}

fn require_on_manifold(p: &LorentzPoint, curvature: Curvature) -> Result<(), GeometryError> {
    let residual = membership_residual(p, curvature);
    if p.time <= 0.0 || residual.abs() > MEMBERSHIP_TOL {
        return Err(GeometryError::OffManifold { residual });
    }
    Ok(())
}

/// `acosh(1 + x)` for `x >= 0`, accurate down to `x = 0`.
fn acosh_1p(x: f64) -> f64 {
    let x = x.max(0.0);
    (x + (x * (x + 2.0)).sqrt()).ln_1p()
}

/// Geodesic distance `(1/sqrt(kappa)) acosh(-kappa <p, q>_L)`.
///
/// Evaluated through the chord identity on coordinate differences, which is
/// the same quantity with the `acosh` argument's deviation from 1 computed
/// without cancellation. The argument is clamped to `>= 1` (it can dip to
/// `1 - eps` for coincident points), matching the usual manifold-code guard.
pub fn lorentz_distance(
    p: &LorentzPoint,
    q: &LorentzPoint,
    curvature: Curvature,
) -> Result<f64, GeometryError> {
    if p.dim() != q.dim() {
        return Err(GeometryError::DimensionMismatch {
            left: p.dim(),
            right: q.dim(),
        });
    }
    require_on_manifold(p, curvature)?;
    require_on_manifold(q, curvature)?;
    Ok(distance_unchecked(p, q, curvature))
}

pub(crate) fn distance_unchecked(p: &LorentzPoint, q: &LorentzPoint, curvature: Curvature) -> f64 {
    let dt = p.time - q.time;
    let mut chord = -dt * dt;
    for (a, b) in p.spatial.iter().zip(q.spatial.iter()) {
        let d = a - b;
        chord += d * d;
    }
    // -kappa <p,q>_L - 1 == kappa/2 * <p - q, p - q>_L for on-manifold points.
    let excess = 0.5 * curvature.kappa() * chord;
    acosh_1p(excess) / curvature.sqrt_kappa()
}

/// Exterior angle at the pocket between the outward radial direction and the
/// geodesic toward the ligand:
/// `arccos( (m_0 + kappa (<p~, m~> - p_0 m_0) p_0) / (||p~|| sqrt([kappa (<p~, m~> - p_0 m_0)]^2 - 1)) )`.
///
/// The square-root argument equals `sinh^2(sqrt(kappa) d(p, m))` and is
/// clamped to `>= 0`; the `arccos` argument is clamped to `[-1, 1]`.
pub fn exterior_angle(
    pocket: &LorentzPoint,
    ligand: &LorentzPoint,
    curvature: Curvature,
) -> Result<f64, GeometryError> {
    if pocket.dim() != ligand.dim() {
        return Err(GeometryError::DimensionMismatch {
            left: pocket.dim(),
            right: ligand.dim(),
        });
    }
    require_on_manifold(pocket, curvature)?;
    require_on_manifold(ligand, curvature)?;
    let pocket_norm = pocket.spatial_norm();
    if pocket_norm <= POCKET_ORIGIN_EPS {
        return Err(GeometryError::PocketAtOrigin);
    }
    if distance_unchecked(pocket, ligand, curvature) <= COINCIDENT_EPS {
        return Err(GeometryError::CoincidentPoints);
    }
    let kappa = curvature.kappa();
    let inner = lorentz_inner(pocket, ligand).expect("dims checked above");
    // kappa * inner = -cosh(sqrt(kappa) d), so (kappa inner)^2 - 1 = sinh^2.
    let sinh_sq = (kappa * inner) * (kappa * inner) - 1.0;
    let denom = pocket_norm * sinh_sq.max(0.0).sqrt();
    let numer = ligand.time + kappa * inner * pocket.time;
    let cos_phi = if denom > 0.0 { numer / denom } else { 1.0 };
    Ok(cos_phi.clamp(-1.0, 1.0).acos())
}

/// Half-aperture of the cone at a pocket,
/// `arcsin(min(1, 2 r0 / (sqrt(kappa) ||p~||)))`.
///
/// Pockets with `||p~|| <= 2 r0 / sqrt(kappa)` sit in the clamp region and
/// get the maximal aperture `pi/2`.
pub fn half_aperture(
    pocket: &LorentzPoint,
    r0: f64,
    curvature: Curvature,
) -> Result<f64, GeometryError> {
    if !(r0.is_finite() && r0 > 0.0) {
        return Err(GeometryError::NonFinite);
    }
    let pocket_norm = pocket.spatial_norm();
    if pocket_norm <= POCKET_ORIGIN_EPS {
        return Err(GeometryError::PocketAtOrigin);
    }
    let arg = (2.0 * r0 / (curvature.sqrt_kappa() * pocket_norm)).min(1.0);
    Ok(arg.asin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn curv(kappa: f64) -> Curvature {
        Curvature::new(kappa).unwrap()
    }

    fn tangent(spatial: &[f64]) -> TangentAtOrigin {
        TangentAtOrigin::new(spatial.to_vec()).unwrap()
    }

    fn random_point(rng: &mut StdRng, dim: usize, max_radius: f64, kappa: f64) -> LorentzPoint {
        let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = sq_norm(&dir).sqrt().max(1e-12);
        let radius = rng.gen_range(0.0..max_radius);
        let v: Vec<f64> = dir.iter().map(|x| x / norm * radius).collect();
        exp_map_origin(&tangent(&v), curv(kappa))
    }

    #[test]
    fn inner_product_at_origin() {
        let o = [1.0, 0.0, 0.0];
        assert_eq!(lorentz_inner_raw(&o, &o).unwrap(), -1.0);
    }

    #[test]
    fn inner_product_hand_value() {
        // q = (sqrt 2, 1, 0) lies on the unit-curvature hyperboloid: 2 - 1 = 1.
        let p = [1.0, 0.0, 0.0];
        let q = [2f64.sqrt(), 1.0, 0.0];
        let got = lorentz_inner_raw(&p, &q).unwrap();
        assert!((got + 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn inner_product_symmetry_random() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..100 {
            let p: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let pq = lorentz_inner_raw(&p, &q).unwrap();
            let qp = lorentz_inner_raw(&q, &p).unwrap();
            assert_eq!(pq, qp);
        }
    }

    #[test]
    fn inner_product_dimension_mismatch() {
        let err = lorentz_inner_raw(&[1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap_err();
        assert_eq!(err, GeometryError::DimensionMismatch { left: 2, right: 3 });
    }

    #[test]
    fn lift_zero_vector_is_origin() {
        let p = lift_spatial(&[0.0, 0.0, 0.0], curv(1.0)).unwrap();
        assert_eq!(p.time(), 1.0);
        assert_eq!(p.spatial(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn lift_unit_vector_time_is_sqrt2() {
        let p = lift_spatial(&[1.0, 0.0], curv(1.0)).unwrap();
        assert!((p.time() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lift_round_trip() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let kappa = rng.gen_range(0.3..3.0);
            let p = random_point(&mut rng, 4, 5.0, kappa);
            let q = lift_spatial(p.spatial(), curv(kappa)).unwrap();
            assert_eq!(p.time(), q.time());
            assert_eq!(p.spatial(), q.spatial());
        }
    }

    #[test]
    fn lift_rejects_non_finite() {
        assert_eq!(
            lift_spatial(&[f64::NAN, 0.0], curv(1.0)).unwrap_err(),
            GeometryError::NonFinite
        );
    }

    #[test]
    fn exp_map_zero_is_origin() {
        for kappa in [0.5, 1.0, 2.0] {
            let p = exp_map_origin(&tangent(&[0.0, 0.0]), curv(kappa));
            assert_eq!(p.time(), curv(kappa).origin_time());
            assert_eq!(p.spatial(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn exp_map_one_dim_hand_value() {
        // kappa = 1, v = (0.7): (cosh 0.7, sinh 0.7).
        let p = exp_map_origin(&tangent(&[0.7]), curv(1.0));
        assert!((p.time() - 0.7f64.cosh()).abs() < 1e-14);
        assert!((p.spatial()[0] - 0.7f64.sinh()).abs() < 1e-14);
        assert!((p.time() - 1.255169).abs() < 1e-6);
        assert!((p.spatial()[0] - 0.758584).abs() < 1e-6);
    }

    #[test]
    fn exp_map_membership_across_radii() {
        let mut rng = StdRng::seed_from_u64(13);
        for kappa in [0.5, 1.0, 2.0] {
            for _ in 0..500 {
                let p = random_point(&mut rng, 6, 20.0, kappa);
                assert!(membership_residual(&p, curv(kappa)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn exp_map_radius_identity() {
        let c = curv(1.0);
        let o = LorentzPoint::origin(3, c);
        for r in [1e-6, 0.1, 1.0, 10.0] {
            let v = tangent(&[r, 0.0, 0.0]);
            let d = lorentz_distance(&exp_map_origin(&v, c), &o, c).unwrap();
            assert!(
                (d - r).abs() / r <= 1e-8,
                "radius {r}: got {d}, rel err {}",
                (d - r).abs() / r
            );
        }
    }

    #[test]
    fn distance_origin_to_itself() {
        let c = curv(1.0);
        let o = LorentzPoint::origin(2, c);
        assert_eq!(lorentz_distance(&o, &o, c).unwrap(), 0.0);
    }

    #[test]
    fn distance_hand_value() {
        // q = (cosh 1.5, sinh 1.5) is at geodesic radius 1.5 from the origin.
        let c = curv(1.0);
        let o = LorentzPoint::origin(1, c);
        let q = exp_map_origin(&tangent(&[1.5]), c);
        let d = lorentz_distance(&o, &q, c).unwrap();
        assert!((d - 1.5).abs() < 1e-12);
    }

    #[test]
    fn distance_rejects_off_manifold() {
        let c = curv(1.0);
        let o = LorentzPoint::origin(2, c);
        let bad = LorentzPoint::from_parts_unchecked(2.0, vec![0.0, 0.0]);
        assert!(matches!(
            lorentz_distance(&o, &bad, c),
            Err(GeometryError::OffManifold { .. })
        ));
    }

    #[test]
    fn distance_symmetry_and_triangle_inequality() {
        let mut rng = StdRng::seed_from_u64(99);
        let c = curv(1.0);
        for _ in 0..1000 {
            let p = random_point(&mut rng, 3, 4.0, 1.0);
            let q = random_point(&mut rng, 3, 4.0, 1.0);
            let r = random_point(&mut rng, 3, 4.0, 1.0);
            let pq = lorentz_distance(&p, &q, c).unwrap();
            let qp = lorentz_distance(&q, &p, c).unwrap();
            assert!((pq - qp).abs() <= 1e-9);
            let pr = lorentz_distance(&p, &r, c).unwrap();
            let qr = lorentz_distance(&q, &r, c).unwrap();
            assert!(pr <= pq + qr + 1e-12);
        }
    }

    /// Law-of-cosines oracle: interior angle at the pocket from the three
    /// pairwise geodesic distances among origin, pocket and ligand, then
    /// exterior = pi - interior. Independent of the closed-form route.
    fn exterior_angle_oracle(pocket: &LorentzPoint, ligand: &LorentzPoint, c: Curvature) -> f64 {
        let o = LorentzPoint::origin(pocket.dim(), c);
        let sk = c.sqrt_kappa();
        let a = sk * lorentz_distance(&o, pocket, c).unwrap();
        let b = sk * lorentz_distance(pocket, ligand, c).unwrap();
        let d = sk * lorentz_distance(&o, ligand, c).unwrap();
        let cos_gamma = (a.cosh() * b.cosh() - d.cosh()) / (a.sinh() * b.sinh());
        std::f64::consts::PI - cos_gamma.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn exterior_angle_near_collinear_outward() {
        let c = curv(1.0);
        let pocket = exp_map_origin(&tangent(&[1.0, 0.0]), c);
        let ligand = exp_map_origin(&tangent(&[2.0 * (1e-6f64).cos(), 2.0 * (1e-6f64).sin()]), c);
        let phi = exterior_angle(&pocket, &ligand, c).unwrap();
        let oracle = exterior_angle_oracle(&pocket, &ligand, c);
        assert!(phi < 1e-3, "got {phi}");
        assert!((phi - oracle).abs() < 1e-6);
    }

    #[test]
    fn exterior_angle_near_collinear_inward() {
        let c = curv(1.0);
        let pocket = exp_map_origin(&tangent(&[1.0, 0.0]), c);
        let ligand = exp_map_origin(&tangent(&[0.5 * (1e-6f64).cos(), 0.5 * (1e-6f64).sin()]), c);
        let phi = exterior_angle(&pocket, &ligand, c).unwrap();
        assert!(phi > std::f64::consts::PI - 1e-3, "got {phi}");
    }

    #[test]
    fn exterior_angle_matches_oracle_on_random_pairs() {
        let mut rng = StdRng::seed_from_u64(2024);
        let c = curv(1.0);
        let mut checked = 0;
        while checked < 1000 {
            let pocket = random_point(&mut rng, 3, 3.0, 1.0);
            let ligand = random_point(&mut rng, 3, 3.0, 1.0);
            if pocket.spatial_norm() < 1e-2
                || distance_unchecked(&pocket, &ligand, c) < 1e-4
                || lorentz_distance(&LorentzPoint::origin(3, c), &ligand, c).unwrap() < 1e-4
            {
                continue;
            }
            let phi = exterior_angle(&pocket, &ligand, c).unwrap();
            let oracle = exterior_angle_oracle(&pocket, &ligand, c);
            assert!(
                (phi - oracle).abs() < 1e-6,
                "phi {phi} vs oracle {oracle} (pocket {:?}, ligand {:?})",
                pocket,
                ligand
            );
            checked += 1;
        }
    }

    #[test]
    fn exterior_angle_rejects_origin_pocket() {
        let c = curv(1.0);
        let o = LorentzPoint::origin(2, c);
        let ligand = exp_map_origin(&tangent(&[1.0, 0.0]), c);
        assert_eq!(
            exterior_angle(&o, &ligand, c).unwrap_err(),
            GeometryError::PocketAtOrigin
        );
    }

    #[test]
    fn exterior_angle_rejects_coincident_points() {
        let c = curv(1.0);
        let p = exp_map_origin(&tangent(&[1.0, 0.0]), c);
        assert_eq!(
            exterior_angle(&p, &p.clone(), c).unwrap_err(),
            GeometryError::CoincidentPoints
        );
    }

    #[test]
    fn half_aperture_boundary_and_hand_values() {
        let c = curv(1.0);
        let r0 = 0.1;
        let at = |norm: f64| lift_spatial(&[norm, 0.0], c).unwrap();
        // ||p~|| = 2 r0: arcsin(1) = pi/2.
        let w = half_aperture(&at(2.0 * r0), r0, c).unwrap();
        assert!((w - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // ||p~|| = 4 r0: arcsin(0.5) = pi/6.
        let w = half_aperture(&at(4.0 * r0), r0, c).unwrap();
        assert!((w - std::f64::consts::FRAC_PI_6).abs() < 1e-12);
        // ||p~|| = r0 is inside the clamp region: still pi/2.
        let w = half_aperture(&at(r0), r0, c).unwrap();
        assert!((w - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn half_aperture_rejects_origin() {
        let c = curv(1.0);
        assert_eq!(
            half_aperture(&LorentzPoint::origin(2, c), 0.1, c).unwrap_err(),
            GeometryError::PocketAtOrigin
        );
    }

    #[test]
    fn small_angle_law_quadratic_decay() {
        // Two tangent vectors of norm r at angle theta: the geodesic distance
        // approaches sinh(sqrt(k) r)/sqrt(k) * theta, with relative error
        // decaying quadratically in theta.
        let c = curv(1.0);
        let r = 2.0;
        let rel_err = |theta: f64| {
            let v1 = tangent(&[r, 0.0]);
            let v2 = tangent(&[r * theta.cos(), r * theta.sin()]);
            let d = lorentz_distance(&exp_map_origin(&v1, c), &exp_map_origin(&v2, c), c).unwrap();
            (d - r.sinh() * theta).abs() / d
        };
        let e2 = rel_err(1e-2);
        let e3 = rel_err(1e-3);
        assert!(e3 <= e2 / 50.0, "e3 {e3} vs e2 {e2}");
    }

    proptest! {
        #[test]
        fn half_aperture_non_increasing_in_pocket_norm(
            n1 in 0.05f64..5.0,
            n2 in 0.05f64..5.0,
        ) {
            let c = curv(1.0);
            let (lo, hi) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
            let w_lo = half_aperture(&lift_spatial(&[lo, 0.0], c).unwrap(), 0.1, c).unwrap();
            let w_hi = half_aperture(&lift_spatial(&[hi, 0.0], c).unwrap(), 0.1, c).unwrap();
            prop_assert!(w_hi <= w_lo + 1e-12);
        }

        #[test]
        fn exp_map_output_is_on_manifold(
            x in -10.0f64..10.0,
            y in -10.0f64..10.0,
            kappa in 0.3f64..3.0,
        ) {
            let c = curv(kappa);
            let p = exp_map_origin(&tangent(&[x, y]), c);
            prop_assert!(membership_residual(&p, c).abs() <= 1e-9);
        }
    }
}
