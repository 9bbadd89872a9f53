use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The role shared by every worker of a cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ActorTrain,
    ActorInfer,
    Reference,
    Critic,
    Reward,
    Environment,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::ActorTrain, Role::ActorInfer, Role::Reference, Role::Critic, Role::Reward, Role::Environment];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::ActorTrain => "actor_train",
            Role::ActorInfer => "actor_infer",
            Role::Reference => "reference",
            Role::Critic => "critic",
            Role::Reward => "reward",
            Role::Environment => "environment",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL.iter().copied().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown role `{s}`"))
    }
}
