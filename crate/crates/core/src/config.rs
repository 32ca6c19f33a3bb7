//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::data::raster::CropSpec;
use crate::error::{Error, Result};
use crate::nn::ConvGeometry;
use crate::scene::{AgentClass, ClassTable, EdgeType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapEncoderConfig {
    pub crop: CropSpec,
    /// Semantic channels `L` of the input raster.
    pub channels: usize,
    pub conv_channels: [usize; 3],
    pub kernel: usize,
    pub strides: [usize; 3],
    /// Width of the dense layer after the convolutions.
    pub dense: usize,
}

impl Default for MapEncoderConfig {
    fn default() -> Self {
        Self {
            crop: CropSpec::new(39.6, 0.33),
            channels: 1,
            conv_channels: [16, 16, 16],
            kernel: 5,
            strides: [2, 3, 2],
            dense: 512,
        }
    }
}

impl MapEncoderConfig {
    /// Geometry of each convolution in order.
    pub fn geometries(&self) -> Result<[ConvGeometry; 3]> {
        let mut size = self.crop.size();
        let mut channels = self.channels;
        let mut out = Vec::with_capacity(3);
        for (k, (&oc, &stride)) in self.conv_channels.iter().zip(&self.strides).enumerate() {
            let g = ConvGeometry {
                in_channels: channels,
                in_h: size,
                in_w: size,
                out_channels: oc,
                kernel: self.kernel,
                stride,
            };
            g.validate().map_err(|_| {
                Error::InvalidInput(format!(
                    "map conv layer {} cannot apply a {}×{} kernel with stride {stride} to a {size}×{size} input",
                    k + 1,
                    self.kernel,
                    self.kernel
                ))
            })?;
            size = g.out_h();
            channels = oc;
            out.push(g);
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn flat_width(&self) -> Result<usize> {
        Ok(self.geometries()?[2].out_len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classes: ClassTable,
    /// Classes that get their own node model.
    pub node_classes: Vec<AgentClass>,
    /// Edge types with their own shared edge encoder.
    pub edge_types: Vec<EdgeType>,
    pub latent_size: usize,
    pub history_hidden: usize,
    pub edge_hidden: usize,
    pub attention_dim: usize,
    /// Per-direction width of the bidirectional future encoders.
    pub future_hidden: usize,
    pub decoder_hidden: usize,
    pub mixture_components: usize,
    pub sigma_min: f64,
    pub rho_max: f64,
    pub min_history: usize,
    pub use_edges: bool,
    pub use_map: bool,
    pub use_robot: bool,
    pub map: MapEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: ClassTable::default(),
            node_classes: vec![AgentClass::Pedestrian],
            edge_types: vec![EdgeType::new(AgentClass::Pedestrian, AgentClass::Pedestrian)],
            latent_size: 25,
            history_hidden: 32,
            edge_hidden: 8,
            attention_dim: 8,
            future_hidden: 32,
            decoder_hidden: 512,
            mixture_components: 16,
            sigma_min: 1e-3,
            rho_max: 0.999,
            min_history: 2,
            use_edges: true,
            use_map: false,
            use_robot: false,
            map: MapEncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.classes.validate()?;
        let positive = [
            ("latent_size", self.latent_size),
            ("history_hidden", self.history_hidden),
            ("edge_hidden", self.edge_hidden),
            ("attention_dim", self.attention_dim),
            ("future_hidden", self.future_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("mixture_components", self.mixture_components),
            ("min_history", self.min_history),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be at least 1")));
            }
        }
        if self.node_classes.is_empty() {
            return Err(Error::InvalidInput("node_classes must not be empty".into()));
        }
        if !(self.sigma_min > 0.0) || !(self.rho_max > 0.0 && self.rho_max < 1.0) {
            return Err(Error::InvalidInput("need sigma_min > 0 and 0 < rho_max < 1".into()));
        }
        if self.use_map {
            self.map.crop.validate()?;
            if self.map.channels == 0 || self.map.dense == 0 || self.map.conv_channels.contains(&0) {
                return Err(Error::InvalidInput("map encoder widths must be at least 1".into()));
            }
            self.map.geometries()?;
        }
        Ok(())
    }

    pub fn edge_types_into(&self, class: AgentClass) -> Vec<EdgeType> {
        self.edge_types.iter().copied().filter(|e| e.target == class).collect()
    }

    pub fn has_edges(&self, class: AgentClass) -> bool {
        self.use_edges && !self.edge_types_into(class).is_empty()
    }

    /// `(component, width)` in backbone order.
    pub fn backbone_layout(&self, class: AgentClass) -> Vec<(&'static str, usize)> {
        let mut out = vec![("history", self.history_hidden)];
        if self.has_edges(class) {
            out.push(("edges", self.edge_hidden));
        }
        if self.use_map {
            out.push(("map", self.map.dense));
        }
        if self.use_robot {
            out.push(("robot_future", 2 * self.future_hidden));
        }
        out
    }

    pub fn backbone_width(&self, class: AgentClass) -> usize {
        self.backbone_layout(class).iter().map(|c| c.1).sum()
    }
}
