//! Protocol partition: the manifest's role labels indexed by subject.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Role};
use crate::error::{Error, Result};

/// Protocol configuration label. The split itself comes from the manifest.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub enum ProtocolConfig {
    #[default]
    I,
    II,
}

impl fmt::Display for ProtocolConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolConfig::I => "I",
            ProtocolConfig::II => "II",
        })
    }
}

impl FromStr for ProtocolConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(ProtocolConfig::I),
            "II" | "2" => Ok(ProtocolConfig::II),
            _ => Err(Error::Config(format!(
                "unknown protocol configuration {s:?}"
            ))),
        }
    }
}

/// Row indices into the manifest, grouped by role and subject.
pub type RoleIndex = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProtocolPartition {
    pub config: ProtocolConfig,
    pub client_train: RoleIndex,
    pub client_eval: RoleIndex,
    pub client_test: RoleIndex,
    pub impostor_eval: RoleIndex,
    pub impostor_test: RoleIndex,
}

impl ProtocolPartition {
    pub fn role(&self, role: Role) -> &RoleIndex {
        match role {
            Role::ClientTrain => &self.client_train,
            Role::ClientEval => &self.client_eval,
            Role::ClientTest => &self.client_test,
            Role::ImpostorEval => &self.impostor_eval,
            Role::ImpostorTest => &self.impostor_test,
        }
    }

    fn role_mut(&mut self, role: Role) -> &mut RoleIndex {
        match role {
            Role::ClientTrain => &mut self.client_train,
            Role::ClientEval => &mut self.client_eval,
            Role::ClientTest => &mut self.client_test,
            Role::ImpostorEval => &mut self.impostor_eval,
            Role::ImpostorTest => &mut self.impostor_test,
        }
    }

    /// Subjects with any client role.
    pub fn clients(&self) -> BTreeSet<&str> {
        [&self.client_train, &self.client_eval, &self.client_test]
            .into_iter()
            .flat_map(|r| r.keys().map(String::as_str))
            .collect()
    }

    /// All row indices of a role, ordered by subject then manifest row.
    pub fn rows(&self, role: Role) -> Vec<usize> {
        self.role(role).values().flatten().copied().collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.role(role).values().map(Vec::len).sum()
    }

    /// Checks that each listed role is populated: every client has a sample
    /// in each listed client role, and each listed impostor role is non-empty.
    pub fn require(&self, roles: &[Role]) -> Result<()> {
        let clients = self.clients();
        for &role in roles {
            let index = self.role(role);
            if role.is_client() {
                if let Some(c) = clients.iter().find(|c| !index.contains_key(**c)) {
                    return Err(Error::MissingRole {
                        role: role.as_str(),
                        context: format!("client {c} has no {role} samples"),
                    });
                }
            }
            if index.is_empty() {
                return Err(Error::MissingRole {
                    role: role.as_str(),
                    context: "no rows carry this role".into(),
                });
            }
        }
        Ok(())
    }

    /// Counts per role, for logs and the CLI.
    pub fn summary(&self) -> String {
        Role::ALL
            .iter()
            .map(|&r| {
                format!(
                    "{r}: {} rows / {} subjects",
                    self.count(r),
                    self.role(r).len()
                )
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Indexes the manifest by role and checks the protocol invariants, with
/// every role required.
pub fn partition(manifest: &DatasetManifest, config: ProtocolConfig) -> Result<ProtocolPartition> {
    partition_requiring(manifest, config, &Role::ALL)
}

/// Like [`partition`], but only the listed roles must be populated. Overlap
/// and subject-disjointness checks always apply.
pub fn partition_requiring(
    manifest: &DatasetManifest,
    config: ProtocolConfig,
    required: &[Role],
) -> Result<ProtocolPartition> {
    let mut part = ProtocolPartition {
        config,
        ..Default::default()
    };
    let mut seen: HashMap<&PathBuf, (usize, Role)> = HashMap::new();
    let mut subject_kind: HashMap<&str, Role> = HashMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if let Some(&(first, role)) = seen.get(&r.path) {
            return Err(Error::Manifest(format!(
                "{} appears on rows {} ({role}) and {} ({})",
                r.path.display(),
                first + 2,
                i + 2,
                r.role
            )));
        }
        seen.insert(&r.path, (i, r.role));

        match subject_kind.get(r.subject_id.as_str()) {
            Some(&prev)
                if prev.is_client() != r.role.is_client()
                    || (!prev.is_client() && prev != r.role) =>
            {
                return Err(Error::Manifest(format!(
                    "subject {} is labelled both {prev} and {}",
                    r.subject_id, r.role
                )));
            }
            Some(_) => {}
            None => {
                subject_kind.insert(&r.subject_id, r.role);
            }
        }
        part.role_mut(r.role)
            .entry(r.subject_id.clone())
            .or_default()
            .push(i);
    }
    part.require(required)?;
    Ok(part)
}
