//! Configuration: robot model (DH table, base geometry, mount offset),
//! constraint sets and solver options, with TOML parsing and compiled-in
//! defaults. Units are meters and radians throughout.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{BaseGeometry, DhRow, DhTable, KinematicsError, MountOffset};
use crate::plant::ConstraintSets;
use crate::so3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
}

/// Fully resolved robot description.
#[derive(Debug, Clone)]
pub struct RobotModel {
    pub dh: DhTable,
    pub geometry: BaseGeometry,
    pub mount: MountOffset,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            dh: DhTable::default(),
            geometry: BaseGeometry::default(),
            mount: MountOffset::default(),
        }
    }
}

/// Options forwarded to the NLP solver plus the warm-start switch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    pub constraint_tolerance: f64,
    pub warm_start: bool,
    /// Quasi-Newton updates on top of the exact-objective Hessian seed.
    /// The stage cost is exactly quadratic in the decision variables, so
    /// the seed already matches the objective curvature; updates only add
    /// the multiplier-weighted constraint curvature.
    pub hessian_updates: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            kkt_tolerance: 1e-6,
            constraint_tolerance: 1e-8,
            warm_start: true,
            hessian_updates: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_iterations == 0 {
            return Err(ConfigError::Invalid {
                field: "solver.max_iterations".into(),
                reason: "must be at least 1".into(),
            });
        }
        for (value, field) in [
            (self.kkt_tolerance, "solver.kkt_tolerance"),
            (self.constraint_tolerance, "solver.constraint_tolerance"),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ConfigError::Invalid {
                    field: field.into(),
                    reason: "must be a positive finite number".into(),
                });
            }
        }
        Ok(())
    }
}

/// Serialized form of [`MountOffset`]: translation plus Z-Y-X Euler angles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MountOffsetConfig {
    pub translation: [f64; 3],
    pub rotation_zyx: [f64; 3],
}

impl Default for MountOffsetConfig {
    fn default() -> Self {
        let mount = MountOffset::default();
        Self {
            translation: [mount.translation.x, mount.translation.y, mount.translation.z],
            rotation_zyx: [0.0, 0.0, 0.0],
        }
    }
}

impl From<&MountOffsetConfig> for MountOffset {
    fn from(cfg: &MountOffsetConfig) -> Self {
        MountOffset {
            rotation: so3::euler_zyx_to_rotation(
                cfg.rotation_zyx[0],
                cfg.rotation_zyx[1],
                cfg.rotation_zyx[2],
            ),
            translation: Vector3::new(cfg.translation[0], cfg.translation[1], cfg.translation[2]),
        }
    }
}

/// Serialized robot section: `dh_table` rows, `base_geometry` and
/// `mount_offset`. Omitted sections fall back to the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    pub dh_table: Option<Vec<DhRow>>,
    pub base_geometry: Option<BaseGeometry>,
    pub mount_offset: Option<MountOffsetConfig>,
}

impl RobotConfig {
    pub fn resolve(&self) -> Result<RobotModel, ConfigError> {
        let dh = match &self.dh_table {
            Some(rows) => DhTable::new(rows.clone())?,
            None => DhTable::default(),
        };
        let geometry = self.base_geometry.unwrap_or_default();
        geometry.validate()?;
        let mount = self
            .mount_offset
            .as_ref()
            .map(MountOffset::from)
            .unwrap_or_default();
        Ok(RobotModel {
            dh,
            geometry,
            mount,
        })
    }

    /// Serialized form of the compiled-in default model.
    pub fn default_explicit() -> Self {
        Self {
            dh_table: Some(DhTable::default().rows().to_vec()),
            base_geometry: Some(BaseGeometry::default()),
            mount_offset: Some(MountOffsetConfig::default()),
        }
    }
}

pub(crate) fn validate_constraint_sets(sets: &ConstraintSets) -> Result<(), ConfigError> {
    for i in 0..3 {
        if !(sets.position_lower[i] < sets.position_upper[i]) {
            return Err(ConfigError::Invalid {
                field: format!("constraints.position[{i}]"),
                reason: "lower bound must be below upper bound".into(),
            });
        }
    }
    for i in 0..7 {
        if !(sets.joint_lower[i] < sets.joint_upper[i]) {
            return Err(ConfigError::Invalid {
                field: format!("constraints.joint[{i}]"),
                reason: "lower bound must be below upper bound".into(),
            });
        }
    }
    for (value, field) in [
        (sets.wheel_speed_max, "constraints.wheel_speed_max"),
        (sets.joint_rate_max, "constraints.joint_rate_max"),
        (sets.singularity_epsilon, "constraints.singularity_epsilon"),
    ] {
        if !(value > 0.0) || !value.is_finite() {
            return Err(ConfigError::Invalid {
                field: field.into(),
                reason: "must be a positive finite number".into(),
            });
        }
    }
    Ok(())
}
