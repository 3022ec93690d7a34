//! Desk-scale simulator for cooperative radio SLAM in ISAC networks.
//!
//! The crate covers the whole pipeline: a 2D specular world model
//! ([`geometry`]), multipath measurement synthesis ([`measurement`]),
//! monostatic echo sensing ([`active`]), particle belief-propagation SLAM
//! ([`slam`]), multi-user map crowdsourcing ([`crowd`]), beam sweeping and
//! SLAM-aided tracking ([`beam`]), evaluation metrics ([`metrics`]) and a
//! scenario-driven experiment harness ([`scenario`], [`harness`]).

pub mod active;
pub mod beam;
pub mod crowd;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod measurement;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod slam;

pub use error::Error;

/// Speed of light in vacuum, m/s. Fixed, not configurable.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn wrap_angle_range(a in -1e4f64..1e4) {
            let w = wrap_angle(a);
            prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
            // same angle modulo 2*pi
            let d = (w - a) / (2.0 * std::f64::consts::PI);
            prop_assert!((d - d.round()).abs() < 1e-9);
        }
    }
}
