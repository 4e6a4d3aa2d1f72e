//! Object classes and 3-D box annotations.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const N_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Truck,
    ConstructionVehicle,
    Bus,
    Trailer,
    Barrier,
    Motorcycle,
    Bicycle,
    Pedestrian,
    TrafficCone,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; N_CLASSES] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::ConstructionVehicle,
        ObjectClass::Bus,
        ObjectClass::Trailer,
        ObjectClass::Barrier,
        ObjectClass::Motorcycle,
        ObjectClass::Bicycle,
        ObjectClass::Pedestrian,
        ObjectClass::TrafficCone,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::ConstructionVehicle => "construction_vehicle",
            ObjectClass::Bus => "bus",
            ObjectClass::Trailer => "trailer",
            ObjectClass::Barrier => "barrier",
            ObjectClass::Motorcycle => "motorcycle",
            ObjectClass::Bicycle => "bicycle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::TrafficCone => "traffic_cone",
        }
    }

    /// Typical `(length, width, height)` in metres.
    pub fn mean_size(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [4.6, 1.9, 1.7],
            ObjectClass::Truck => [6.9, 2.5, 2.8],
            ObjectClass::ConstructionVehicle => [6.4, 2.8, 3.2],
            ObjectClass::Bus => [11.0, 2.9, 3.5],
            ObjectClass::Trailer => [12.3, 2.9, 3.9],
            ObjectClass::Barrier => [0.5, 2.5, 1.0],
            ObjectClass::Motorcycle => [2.1, 0.8, 1.5],
            ObjectClass::Bicycle => [1.7, 0.6, 1.3],
            ObjectClass::Pedestrian => [0.7, 0.7, 1.8],
            ObjectClass::TrafficCone => [0.4, 0.4, 1.1],
        }
    }
}

/// An oriented 3-D box in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub class: ObjectClass,
    /// `(x, y, z)` of the box centre, metres.
    pub center: [f64; 3],
    /// `(length, width, height)`, metres; length runs along the heading.
    pub size: [f64; 3],
    /// Heading about +Z, radians.
    pub yaw: f64,
}

impl Box3d {
    pub fn new(class: ObjectClass, center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("box size must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(invalid("box pose must be finite"));
        }
        Ok(Self {
            class,
            center,
            size,
            yaw,
        })
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| {
            [
                self.center[0] + c * a - s * b,
                self.center[1] + s * a + c * b,
            ]
        })
    }

    /// Whether a world point lies inside the BEV footprint.
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let a = c * dx + s * dy;
        let b = -s * dx + c * dy;
        a.abs() <= self.size[0] / 2.0 && b.abs() <= self.size[1] / 2.0
    }

    pub fn aspect(&self) -> f64 {
        self.size[0] / self.size[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_ids_round_trip() {
        for (i, c) in ObjectClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ObjectClass::from_index(i), Some(*c));
        }
        assert_eq!(ObjectClass::from_index(10), None);
        assert_eq!(ObjectClass::Pedestrian.index(), 8);
    }

    #[test]
    fn footprint_and_containment() {
        let b = Box3d::new(ObjectClass::Car, [1.0, 2.0, 0.0], [4.0, 2.0, 1.5], std::f64::consts::FRAC_PI_2).unwrap();
        let fp = b.footprint();
        assert!((fp[0][0] - 0.0).abs() < 1e-12 && (fp[0][1] - 4.0).abs() < 1e-12);
        assert!(b.contains_xy(1.0, 3.9));
        assert!(!b.contains_xy(2.5, 2.0));
        assert!(Box3d::new(ObjectClass::Car, [0.0; 3], [0.0, 1.0, 1.0], 0.0).is_err());
    }
}
