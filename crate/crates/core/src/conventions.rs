//! Frame and axis conventions shared by every module.
//!
//! Ego frame: origin at the ego vehicle, `+x` forward, `+y` left, meters.
//! The BEV window spans `x ∈ [-30, 30]` (60 m, longitudinal) and
//! `y ∈ [-15, 15]` (30 m, lateral).
//!
//! Raster lattice: image rows run along ego `x` with row 0 the forward-most
//! row; image columns run along ego `y` with column 0 the left-most column.
//! A raster of `H × W` pixels therefore has `H` rows covering the 60 m
//! extent and `W` columns covering the 30 m extent. Pixel `(r, c)` has its
//! center at `x = X_MAX - (r + 0.5)·mpp_y`, `y = Y_MAX - (c + 0.5)·mpp_x`.
//!
//! Image axes follow the sampling-grid convention: image `x` (`u`) is the
//! horizontal axis along columns and image `y` (`v`) the vertical axis along
//! rows, so `mpp_x` is meters per column step and `mpp_y` meters per row step.
//! Normalized coordinates use align-corners: pixel `i` of an axis with `N`
//! samples sits at `-1 + 2i/(N-1)`.
//!
//! Poses predicted by the vector branch live in the ego frame. Poses used by
//! the raster warp (micro-alignment, satellite drift) live in the image frame:
//! `dx` is meters along image `u`, `dy` meters along image `v`.

pub const WINDOW_LONGITUDINAL_M: f64 = 60.0;
pub const WINDOW_LATERAL_M: f64 = 30.0;
pub const X_MIN: f64 = -WINDOW_LONGITUDINAL_M / 2.0;
pub const X_MAX: f64 = WINDOW_LONGITUDINAL_M / 2.0;
pub const Y_MIN: f64 = -WINDOW_LATERAL_M / 2.0;
pub const Y_MAX: f64 = WINDOW_LATERAL_M / 2.0;

/// Points per resampled polyline.
pub const POINTS_PER_POLYLINE: usize = 11;

/// Lower bound for confidences and the presence log-offset.
pub const EPS: f64 = 1e-8;

/// Map element classes predicted by the mapping head, in channel order.
pub const MAP_CLASSES: [&str; 3] = ["ped_crossing", "divider", "boundary"];
pub const NUM_MAP_CLASSES: usize = MAP_CLASSES.len();

/// Chamfer thresholds (meters) for vector-map average precision.
/// Road classes of the SD prior, also the unified polyline category
/// vocabulary. HD boundary polylines use [`HD_BOUNDARY_CATEGORY`]; the
/// source bit of the token keeps the two apart.
pub const SD_CLASSES: [&str; 8] = [
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "residential",
    "service",
    "unclassified",
];
pub const HD_BOUNDARY_CATEGORY: usize = 0;

/// Map-class indices into [`MAP_CLASSES`].
pub const CLASS_PED: usize = 0;
pub const CLASS_DIVIDER: usize = 1;
pub const CLASS_BOUNDARY: usize = 2;

pub const CHAMFER_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

/// Prior sources in presence-mask order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Hd,
    Sd,
    Sat,
    Rsd,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Hd, Source::Sd, Source::Sat, Source::Rsd];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Hd => "hd",
            Source::Sd => "sd",
            Source::Sat => "sat",
            Source::Rsd => "rsd",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Source::Hd | Source::Sd => Family::Vector,
            Source::Sat | Source::Rsd => Family::Raster,
        }
    }
}

impl std::str::FromStr for Source {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hd" => Ok(Source::Hd),
            "sd" => Ok(Source::Sd),
            "sat" => Ok(Source::Sat),
            "rsd" | "r-sd" | "sd_raster" => Ok(Source::Rsd),
            other => Err(crate::Error::validation(format!("unknown source '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Vector,
    Raster,
}

impl Family {
    pub fn sources(self) -> [Source; 2] {
        match self {
            Family::Vector => [Source::Hd, Source::Sd],
            Family::Raster => [Source::Sat, Source::Rsd],
        }
    }
}
