//! Transformation algebra for affine and projective image transformations.
//!
//! Transformations act on normalized image coordinates: the origin sits at the
//! image center and x, y span `[-1, 1]` across the image extent, so parameter
//! ranges are resolution independent and rotation/scaling are center-symmetric.
//! Translation parameters are fractions of image width/height; a fraction `f`
//! maps to `2 * f` normalized units.
//!
//! Every constructor and operation returns homographies normalized so that
//! `m[2][2] == 1` exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::warp::{warp_image, Image};

/// Tolerance below which a determinant counts as singular.
pub const SINGULAR_DET_EPS: f64 = 1e-12;
/// Tolerance below which a homogeneous depth counts as a point at infinity.
pub const DEPTH_EPS: f64 = 1e-12;
/// Tolerance below which `m[2][2]` cannot be used for normalization.
pub const NORMALIZE_EPS: f64 = 1e-9;
/// Condition-number threshold for the four-point linear solve.
pub const DLT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum XformError {
    #[error("singular transform: {0}")]
    SingularTransform(String),
    #[error("degenerate corner configuration: {0}")]
    DegenerateCorners(String),
    #[error("point maps to infinity (|depth| = {depth:.3e})")]
    PointAtInfinity { depth: f64 },
    #[error("empty sample set")]
    EmptySampleSet,
}

/// A 3x3 homogeneous mapping of normalized image coordinates, stored row-major
/// and kept normalized (`m[2][2] == 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Builds a homography from a raw matrix, normalizing it.
    ///
    /// Fails if any entry is non-finite, `|m[2][2]|` is too small to divide
    /// by, or the matrix is not invertible.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self, XformError> {
        for row in &m {
            for &v in row {
                if !v.is_finite() {
                    return Err(XformError::SingularTransform(
                        "non-finite matrix entry".into(),
                    ));
                }
            }
        }
        let normalized = normalize_raw(m)?;
        let det = det3(&normalized);
        if det.abs() <= SINGULAR_DET_EPS {
            return Err(XformError::SingularTransform(format!(
                "|det| = {:.3e}",
                det.abs()
            )));
        }
        Ok(Self { m: normalized })
    }

    /// Translation in normalized units.
    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Counter-clockwise rotation about the origin (the image center).
    pub fn rotation_deg(angle_deg: f64) -> Self {
        let r = angle_deg.to_radians();
        let (s, c) = r.sin_cos();
        Self {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Uniform scaling about the origin.
    pub fn scaling(s: f64) -> Result<Self, XformError> {
        if s == 0.0 || !s.is_finite() {
            return Err(XformError::SingularTransform(format!("scale = {s}")));
        }
        Ok(Self {
            m: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]],
        })
    }

    /// Horizontal shear by an angle.
    pub fn shear_deg(angle_deg: f64) -> Self {
        let t = angle_deg.to_radians().tan();
        Self {
            m: [[1.0, t, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn normalize_raw(m: [[f64; 3]; 3]) -> Result<[[f64; 3]; 3], XformError> {
    let w = m[2][2];
    if w.abs() < NORMALIZE_EPS {
        return Err(XformError::SingularTransform(format!(
            "cannot normalize, |m[2][2]| = {:.3e}",
            w.abs()
        )));
    }
    if w == 1.0 {
        return Ok(m);
    }
    let mut out = m;
    for row in &mut out {
        for v in row.iter_mut() {
            *v /= w;
        }
    }
    out[2][2] = 1.0;
    Ok(out)
}

/// Matrix product `a * b`: applies `b` first, then `a`. The result is
/// normalized.
pub fn compose(a: &Homography, b: &Homography) -> Result<Homography, XformError> {
    let mut p = [[0.0; 3]; 3];
    for (i, row) in p.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a.m[i][k] * b.m[k][j]).sum();
        }
    }
    let det = det3(&p);
    if det.abs() <= SINGULAR_DET_EPS {
        return Err(XformError::SingularTransform(format!(
            "product |det| = {:.3e}",
            det.abs()
        )));
    }
    Ok(Homography { m: normalize_raw(p)? })
}

/// Inverse via the adjugate, normalized.
pub fn invert(h: &Homography) -> Result<Homography, XformError> {
    let m = &h.m;
    let det = det3(m);
    if det.abs() <= SINGULAR_DET_EPS {
        return Err(XformError::SingularTransform(format!(
            "|det| = {:.3e}",
            det.abs()
        )));
    }
    let adj = [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
        ],
        [
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
        ],
        [
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ];
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = adj[i][j] / det;
        }
    }
    Ok(Homography { m: normalize_raw(inv)? })
}

/// Applies `h` to a point, with perspective division.
pub fn apply_point(h: &Homography, p: [f64; 2]) -> Result<[f64; 2], XformError> {
    let m = &h.m;
    let z = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
    if z.abs() < DEPTH_EPS {
        return Err(XformError::PointAtInfinity { depth: z });
    }
    let x = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2];
    let y = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2];
    Ok([x / z, y / z])
}

/// The first eight row-major entries of the normalized matrix, used as the
/// regression target for a transformation.
pub fn to_target_vector(h: &Homography) -> Result<[f64; 8], XformError> {
    // Stored homographies are normalized on construction; the check guards
    // values deserialized or constructed through other paths.
    if (h.m[2][2] - 1.0).abs() > 0.0 && h.m[2][2].abs() < NORMALIZE_EPS {
        return Err(XformError::SingularTransform(format!(
            "|m[2][2]| = {:.3e}",
            h.m[2][2].abs()
        )));
    }
    let m = normalize_raw(h.m)?;
    Ok([
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1],
    ])
}

/// Rebuilds the normalized homography from its eight leading entries.
pub fn from_target_vector(v: &[f64; 8]) -> Result<Homography, XformError> {
    Homography::from_matrix([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], 1.0]])
}

/// One half of the squared Euclidean distance between two target vectors.
pub fn param_loss(target: &[f64; 8], predicted: &[f64; 8]) -> f64 {
    0.5 * target
        .iter()
        .zip(predicted)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
}

/// Mean squared pixel difference between applying `t` and `t_hat` to each
/// sample image. The non-parametric transformation distance.
pub fn image_space_loss(
    t: &Homography,
    t_hat: &Homography,
    samples: &[Image],
) -> Result<f64, XformError> {
    if samples.is_empty() {
        return Err(XformError::EmptySampleSet);
    }
    let mut total = 0.0;
    for img in samples {
        let a = warp_image(img, t).map_err(|_| {
            XformError::SingularTransform("unwarpable transform in image-space loss".into())
        })?;
        let b = warp_image(img, t_hat).map_err(|_| {
            XformError::SingularTransform("unwarpable transform in image-space loss".into())
        })?;
        let n = a.pixels().len();
        let mse: f64 = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        total += mse;
    }
    Ok(total / samples.len() as f64)
}

/// Order-configurable factors of an affine transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffineFactor {
    Translate,
    Rotate,
    Shear,
    Scale,
}

/// Factor order used when the configuration does not override it: the
/// leftmost factor is applied last.
pub const DEFAULT_AFFINE_ORDER: [AffineFactor; 4] = [
    AffineFactor::Translate,
    AffineFactor::Rotate,
    AffineFactor::Shear,
    AffineFactor::Scale,
];

/// Parameters of one affine transformation draw. Translations are fractions
/// of image width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translate_x: 0.0,
            translate_y: 0.0,
            scale: 1.0,
            shear_deg: 0.0,
        }
    }
}

/// Parameters of one projective transformation draw: a uniform pre-scale, a
/// right-angle pre-rotation, and per-corner displacements as fractions of
/// image width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectiveParams {
    pub pre_scale: f64,
    /// One of 0, 90, 180, 270.
    pub pre_rotation_deg: f64,
    pub corner_dx: [f64; 4],
    pub corner_dy: [f64; 4],
}

impl ProjectiveParams {
    pub fn identity() -> Self {
        Self {
            pre_scale: 1.0,
            pre_rotation_deg: 0.0,
            corner_dx: [0.0; 4],
            corner_dy: [0.0; 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformParams {
    Affine(AffineParams),
    Projective(ProjectiveParams),
}

/// A drawn transformation: generating parameters, realized homography, and
/// the 8-vector regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSample {
    pub params: TransformParams,
    pub homography: Homography,
    pub target: [f64; 8],
}

/// Closed range for a sampled parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "range low {lo} exceeds high {hi}");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Affine,
    Projective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRanges {
    pub rotation_deg: Range,
    pub translate: Range,
    pub scale: Range,
    pub shear_deg: Range,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            rotation_deg: Range::new(-180.0, 180.0),
            translate: Range::new(-0.2, 0.2),
            scale: Range::new(0.7, 1.3),
            shear_deg: Range::new(-30.0, 30.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectiveRanges {
    pub pre_scale: Range,
    pub corner_shift: Range,
    /// Which quarter-turn pre-rotations (0, 90, 180, 270) may be drawn.
    pub pre_rotation_quarters: [bool; 4],
}

impl Default for ProjectiveRanges {
    fn default() -> Self {
        Self {
            pre_scale: Range::new(0.8, 1.2),
            corner_shift: Range::new(-0.125, 0.125),
            pre_rotation_quarters: [true; 4],
        }
    }
}

/// Sampling distribution over a transformation family.
///
/// `coords` records the coordinate convention the matrices are expressed in;
/// only the centered unit square is supported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XformConfig {
    pub family: Family,
    pub affine: AffineRanges,
    pub projective: ProjectiveRanges,
    pub affine_order: [AffineFactor; 4],
    pub coords: CoordConvention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoordConvention {
    /// Origin at the image center, x and y in `[-1, 1]`.
    #[default]
    CenteredUnit,
}

impl XformConfig {
    pub fn affine_default() -> Self {
        Self {
            family: Family::Affine,
            affine: AffineRanges::default(),
            projective: ProjectiveRanges::default(),
            affine_order: DEFAULT_AFFINE_ORDER,
            coords: CoordConvention::CenteredUnit,
        }
    }

    pub fn projective_default() -> Self {
        Self {
            family: Family::Projective,
            ..Self::affine_default()
        }
    }

    /// A degenerate sampler whose only draw is the identity transformation.
    pub fn identity_only(family: Family) -> Self {
        let mut cfg = match family {
            Family::Affine => Self::affine_default(),
            Family::Projective => Self::projective_default(),
        };
        cfg.affine = AffineRanges {
            rotation_deg: Range::point(0.0),
            translate: Range::point(0.0),
            scale: Range::point(1.0),
            shear_deg: Range::point(0.0),
        };
        cfg.projective = ProjectiveRanges {
            pre_scale: Range::point(1.0),
            corner_shift: Range::point(0.0),
            pre_rotation_quarters: [true, false, false, false],
        };
        cfg
    }

    /// Samples from the configured family.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<TransformSample, XformError> {
        match self.family {
            Family::Affine => Ok(sample_affine(rng, self)),
            Family::Projective => sample_projective(rng, self),
        }
    }
}

fn factor_matrix(p: &AffineParams, f: AffineFactor) -> Result<Homography, XformError> {
    Ok(match f {
        // Fractions of width/height map to twice that in [-1, 1] coordinates.
        AffineFactor::Translate => {
            Homography::translation(2.0 * p.translate_x, 2.0 * p.translate_y)
        }
        AffineFactor::Rotate => Homography::rotation_deg(p.rotation_deg),
        AffineFactor::Shear => Homography::shear_deg(p.shear_deg),
        AffineFactor::Scale => Homography::scaling(p.scale)?,
    })
}

/// Realizes affine parameters as a homography using the given factor order
/// (leftmost applied last).
pub fn affine_to_matrix_with_order(
    p: &AffineParams,
    order: &[AffineFactor; 4],
) -> Result<Homography, XformError> {
    let mut h = factor_matrix(p, order[0])?;
    for f in &order[1..] {
        h = compose(&h, &factor_matrix(p, *f)?)?;
    }
    Ok(h)
}

/// Realizes affine parameters with the default factor order
/// translate∘rotate∘shear∘scale.
pub fn affine_to_matrix(p: &AffineParams) -> Result<Homography, XformError> {
    affine_to_matrix_with_order(p, &DEFAULT_AFFINE_ORDER)
}

/// Draws affine parameters uniformly from the configured ranges.
///
/// Draw order: rotation, translate_x, translate_y, scale, shear.
pub fn sample_affine<R: Rng>(rng: &mut R, cfg: &XformConfig) -> TransformSample {
    let params = AffineParams {
        rotation_deg: cfg.affine.rotation_deg.draw(rng),
        translate_x: cfg.affine.translate.draw(rng),
        translate_y: cfg.affine.translate.draw(rng),
        scale: cfg.affine.scale.draw(rng),
        shear_deg: cfg.affine.shear_deg.draw(rng),
    };
    // Sampled scales exclude zero, so realization cannot fail.
    let homography = affine_to_matrix_with_order(&params, &cfg.affine_order)
        .expect("sampled affine parameters are always realizable");
    let target = to_target_vector(&homography).expect("constructed homography is normalized");
    TransformSample {
        params: TransformParams::Affine(params),
        homography,
        target,
    }
}

/// Corners of the normalized image square, counter-clockwise from the top
/// left in image terms (y grows downward in pixel space).
pub const BASE_CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

fn displaced_corners(p: &ProjectiveParams) -> [[f64; 2]; 4] {
    let mut out = BASE_CORNERS;
    for i in 0..4 {
        out[i][0] += 2.0 * p.corner_dx[i];
        out[i][1] += 2.0 * p.corner_dy[i];
    }
    out
}

fn quad_in_general_position(pts: &[[f64; 2]; 4]) -> bool {
    // No three of the four points may be collinear.
    for skip in 0..4 {
        let tri: Vec<[f64; 2]> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
        let area2 = (tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1])
            - (tri[1][1] - tri[0][1]) * (tri[2][0] - tri[0][0]);
        if area2.abs() < 1e-9 {
            return false;
        }
    }
    true
}

/// Realizes projective parameters: corner mapping after pre-rotation after
/// pre-scaling.
pub fn projective_to_matrix(p: &ProjectiveParams) -> Result<Homography, XformError> {
    let dst = displaced_corners(p);
    if !quad_in_general_position(&dst) {
        return Err(XformError::DegenerateCorners(
            "three displaced corners are collinear".into(),
        ));
    }
    let corner_map = corners_to_homography(&BASE_CORNERS, &dst)?;
    let rot = Homography::rotation_deg(p.pre_rotation_deg);
    let scale = Homography::scaling(p.pre_scale)?;
    compose(&compose(&corner_map, &rot)?, &scale)
}

/// Draws projective parameters: pre-scale, right-angle pre-rotation, then
/// per-corner (dx, dy) displacement pairs. Degenerate corner draws are
/// rejected and redrawn up to 100 times.
pub fn sample_projective<R: Rng>(
    rng: &mut R,
    cfg: &XformConfig,
) -> Result<TransformSample, XformError> {
    const MAX_RETRIES: usize = 100;
    let quarters: Vec<usize> = (0..4)
        .filter(|&q| cfg.projective.pre_rotation_quarters[q])
        .collect();
    assert!(!quarters.is_empty(), "no pre-rotation choice enabled");
    for _ in 0..MAX_RETRIES {
        let pre_scale = cfg.projective.pre_scale.draw(rng);
        let pre_rotation_deg = if quarters.len() == 1 {
            90.0 * quarters[0] as f64
        } else {
            90.0 * quarters[rng.gen_range(0..quarters.len())] as f64
        };
        let mut corner_dx = [0.0; 4];
        let mut corner_dy = [0.0; 4];
        for i in 0..4 {
            corner_dx[i] = cfg.projective.corner_shift.draw(rng);
            corner_dy[i] = cfg.projective.corner_shift.draw(rng);
        }
        let params = ProjectiveParams {
            pre_scale,
            pre_rotation_deg,
            corner_dx,
            corner_dy,
        };
        match projective_to_matrix(&params) {
            Ok(homography) => {
                let target =
                    to_target_vector(&homography).expect("constructed homography is normalized");
                return Ok(TransformSample {
                    params: TransformParams::Projective(params),
                    homography,
                    target,
                });
            }
            Err(XformError::DegenerateCorners(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(XformError::DegenerateCorners(format!(
        "no valid corner draw in {MAX_RETRIES} attempts"
    )))
}

/// Solves for the homography mapping four source points onto four target
/// points (four-point direct linear solve with `m[2][2] = 1`).
pub fn corners_to_homography(
    src: &[[f64; 2]; 4],
    dst: &[[f64; 2]; 4],
) -> Result<Homography, XformError> {
    if src == dst {
        // The unique solution is the identity; returning it exactly keeps
        // degenerate samplers bit-exact.
        return Ok(Homography::identity());
    }
    let mut a = nalgebra::DMatrix::<f64>::zeros(8, 8);
    let mut b = nalgebra::DVector::<f64>::zeros(8);
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a[(2 * i, 0)] = x;
        a[(2 * i, 1)] = y;
        a[(2 * i, 2)] = 1.0;
        a[(2 * i, 6)] = -x * u;
        a[(2 * i, 7)] = -y * u;
        b[2 * i] = u;
        a[(2 * i + 1, 3)] = x;
        a[(2 * i + 1, 4)] = y;
        a[(2 * i + 1, 5)] = 1.0;
        a[(2 * i + 1, 6)] = -x * v;
        a[(2 * i + 1, 7)] = -y * v;
        b[2 * i + 1] = v;
    }
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 0.0 || smax / smin > DLT_CONDITION_LIMIT {
        return Err(XformError::DegenerateCorners(format!(
            "linear system condition {:.3e} exceeds {:.1e}",
            if smin > 0.0 { smax / smin } else { f64::INFINITY },
            DLT_CONDITION_LIMIT
        )));
    }
    let h = svd
        .solve(&b, 0.0)
        .map_err(|e| XformError::DegenerateCorners(e.to_string()))?;
    Homography::from_matrix([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}
