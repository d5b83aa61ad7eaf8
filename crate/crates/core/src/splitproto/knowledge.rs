use serde::{Deserialize, Serialize};

use super::capture::CaptureSet;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tinylm::{ModelConfig, ServerPart, TapPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeLevel {
    BlackBox,
    WhiteBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackKnowledge {
    pub level: KnowledgeLevel,
    pub server_arch_known: bool,
    /// The attacker may also observe traces inside the server's layers.
    #[serde(default)]
    pub server_layer_traces: bool,
}

impl Default for AttackKnowledge {
    fn default() -> Self {
        Self::black_box()
    }
}

impl AttackKnowledge {
    pub fn black_box() -> Self {
        Self {
            level: KnowledgeLevel::BlackBox,
            server_arch_known: false,
            server_layer_traces: false,
        }
    }

    pub fn white_box() -> Self {
        Self {
            level: KnowledgeLevel::WhiteBox,
            server_arch_known: true,
            server_layer_traces: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level == KnowledgeLevel::WhiteBox && !self.server_arch_known {
            return Err(Error::config("white_box knowledge implies server_arch_known"));
        }
        Ok(())
    }
}

/// Architecture metadata an attacker may be told about the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerArchitecture {
    pub config: ModelConfig,
    pub split: TapPoint,
}

/// Everything an attacker is allowed to touch, gated by its knowledge level.
pub struct AttackerView<'a> {
    knowledge: AttackKnowledge,
    captures: &'a CaptureSet,
    server: &'a ServerPart,
}

impl<'a> AttackerView<'a> {
    pub fn new(knowledge: AttackKnowledge, captures: &'a CaptureSet, server: &'a ServerPart) -> Result<Self> {
        knowledge.validate()?;
        Ok(Self {
            knowledge,
            captures,
            server,
        })
    }

    pub fn knowledge(&self) -> AttackKnowledge {
        self.knowledge
    }

    pub fn frames(&self) -> &'a CaptureSet {
        self.captures
    }

    pub fn server_architecture(&self) -> Result<ServerArchitecture> {
        if !self.knowledge.server_arch_known {
            return Err(Error::Policy("server architecture is not known to this attacker".into()));
        }
        Ok(ServerArchitecture {
            config: self.server.config().clone(),
            split: self.server.tap(),
        })
    }

    pub fn server_parameters(&self) -> Result<&'a ParamStore> {
        match self.knowledge.level {
            KnowledgeLevel::WhiteBox => Ok(self.server.store()),
            KnowledgeLevel::BlackBox => Err(Error::Policy(
                "server parameters are not exposed under black_box knowledge".into(),
            )),
        }
    }
}
