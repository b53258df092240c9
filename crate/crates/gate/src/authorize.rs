//! Ownership decisions. Anything not provably the requester's is denied.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use reqwest::StatusCode;
use wattline_registry::Store;

use crate::inspect::QueryInspection;
use crate::GateError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenyReason {
    MissingUser,
    NoWorkloadSelector,
    NonVerifiable,
    NotOwner(String),
    RegistryUnavailable(String),
}

impl DenyReason {
    pub fn code(&self) -> &'static str {
        match self {
            DenyReason::MissingUser => "missing-user",
            DenyReason::NoWorkloadSelector => "no-workload-selector",
            DenyReason::NonVerifiable => "non-verifiable-selector",
            DenyReason::NotOwner(_) => "not-owner",
            DenyReason::RegistryUnavailable(_) => "registry-unavailable",
        }
    }
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::NotOwner(id) => write!(f, "not-owner: {id}"),
            DenyReason::RegistryUnavailable(e) => write!(f, "registry-unavailable: {e}"),
            other => f.write_str(other.code()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

/// Answers whether `user` owns a unit.
#[async_trait]
pub trait Ownership: Send + Sync {
    /// The first id in `uuids` not owned by `user`, if any.
    async fn first_unowned(&self, user: &str, cluster: &str, uuids: &[String]) -> Result<Option<String>, GateError>;
}

/// Reads the registry's store directly.
pub struct StoreOwnership(pub Arc<Store>);

#[async_trait]
impl Ownership for StoreOwnership {
    async fn first_unowned(&self, user: &str, cluster: &str, uuids: &[String]) -> Result<Option<String>, GateError> {
        for id in uuids {
            if !self
                .0
                .is_owner(user, cluster, id)
                .map_err(|e| GateError::Registry(e.to_string()))?
            {
                return Ok(Some(id.clone()));
            }
        }
        Ok(None)
    }
}

/// Calls the registry's `/api/v1/verify`.
pub struct RegistryHttp {
    client: reqwest::Client,
    base: String,
    auth: Option<(String, String)>,
}

impl RegistryHttp {
    pub fn new(base: &str, timeout: Duration, auth: Option<(String, String)>) -> Result<Self, GateError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GateError::Config(e.to_string()))?;
        Ok(Self {
            client,
            base: base.trim_end_matches('/').to_string(),
            auth,
        })
    }
}

#[async_trait]
impl Ownership for RegistryHttp {
    async fn first_unowned(&self, user: &str, cluster: &str, uuids: &[String]) -> Result<Option<String>, GateError> {
        let mut query = vec![("user", user), ("cluster", cluster)];
        query.extend(uuids.iter().map(|u| ("uuid", u.as_str())));
        let mut req = self.client.get(format!("{}/api/v1/verify", self.base)).query(&query);
        if let Some((u, p)) = &self.auth {
            req = req.basic_auth(u, Some(p));
        }
        let resp = req.send().await.map_err(|e| GateError::Registry(e.to_string()))?;
        match resp.status() {
            StatusCode::OK => Ok(None),
            // The endpoint answers for the set; name the first id for the log.
            StatusCode::FORBIDDEN => Ok(uuids.first().cloned()),
            s => Err(GateError::Registry(format!("verify returned {s}"))),
        }
    }
}

/// Allows only when every selector is either bound to ids the user owns
/// or names an allowlisted metric, and at least one selector exists.
pub async fn authorize(
    user: Option<&str>,
    cluster: &str,
    inspection: &QueryInspection,
    allowlist: &BTreeSet<String>,
    ownership: &dyn Ownership,
) -> Decision {
    let Some(user) = user.filter(|u| !u.is_empty()) else {
        return Decision::Deny(DenyReason::MissingUser);
    };
    if inspection.non_verifiable {
        return Decision::Deny(DenyReason::NonVerifiable);
    }
    let unlisted = inspection
        .selectors_without_id
        .iter()
        .any(|name| !name.as_ref().is_some_and(|n| allowlist.contains(n)));
    if unlisted || (inspection.workload_ids.is_empty() && inspection.selectors_without_id.is_empty()) {
        return Decision::Deny(DenyReason::NoWorkloadSelector);
    }
    if inspection.workload_ids.is_empty() {
        return Decision::Allow;
    }
    let ids: Vec<String> = inspection.workload_ids.iter().cloned().collect();
    match ownership.first_unowned(user, cluster, &ids).await {
        Ok(None) => Decision::Allow,
        Ok(Some(id)) => Decision::Deny(DenyReason::NotOwner(id)),
        Err(e) => Decision::Deny(DenyReason::RegistryUnavailable(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inspect::extract_workload_ids;

    struct Fixed;

    #[async_trait]
    impl Ownership for Fixed {
        async fn first_unowned(&self, user: &str, _: &str, uuids: &[String]) -> Result<Option<String>, GateError> {
            Ok(uuids
                .iter()
                .find(|u| !(user == "alice" && u.as_str() == "123"))
                .cloned())
        }
    }

    struct Down;

    #[async_trait]
    impl Ownership for Down {
        async fn first_unowned(&self, _: &str, _: &str, _: &[String]) -> Result<Option<String>, GateError> {
            Err(GateError::Registry("connection refused".into()))
        }
    }

    async fn decide(user: Option<&str>, q: &str, allow: &[&str], o: &dyn Ownership) -> Decision {
        let i = extract_workload_ids(q, "uuid").unwrap();
        let allow = allow.iter().map(|s| s.to_string()).collect();
        authorize(user, "c1", &i, &allow, o).await
    }

    #[tokio::test]
    async fn owner_non_owner_and_default_deny() {
        assert_eq!(
            decide(Some("alice"), r#"x{uuid="123"}"#, &[], &Fixed).await,
            Decision::Allow
        );
        assert_eq!(
            decide(Some("bob"), r#"{uuid="123"}"#, &[], &Fixed).await,
            Decision::Deny(DenyReason::NotOwner("123".into()))
        );
        assert_eq!(
            decide(Some("alice"), "up", &[], &Fixed).await,
            Decision::Deny(DenyReason::NoWorkloadSelector)
        );
        assert_eq!(
            decide(None, r#"x{uuid="123"}"#, &[], &Fixed).await,
            Decision::Deny(DenyReason::MissingUser)
        );
        assert_eq!(
            decide(Some("alice"), "1 + 1", &[], &Fixed).await,
            Decision::Deny(DenyReason::NoWorkloadSelector)
        );
        assert_eq!(
            decide(Some("alice"), r#"x{uuid=~"12.*"}"#, &[], &Fixed).await,
            Decision::Deny(DenyReason::NonVerifiable)
        );
    }

    #[tokio::test]
    async fn allowlist_admits_named_metrics_only() {
        assert_eq!(decide(Some("alice"), "up", &["up"], &Fixed).await, Decision::Allow);
        assert_eq!(
            decide(Some("alice"), r#"{job="x"}"#, &["up"], &Fixed).await,
            Decision::Deny(DenyReason::NoWorkloadSelector)
        );
        assert_eq!(
            decide(Some("alice"), r#"x{uuid="123"} / on() up"#, &["up"], &Fixed).await,
            Decision::Allow
        );
        assert_eq!(
            decide(Some("alice"), r#"x{uuid="123"} / node_power"#, &["up"], &Fixed).await,
            Decision::Deny(DenyReason::NoWorkloadSelector)
        );
    }

    #[tokio::test]
    async fn registry_failure_fails_closed() {
        let d = decide(Some("alice"), r#"x{uuid="123"}"#, &[], &Down).await;
        assert!(matches!(d, Decision::Deny(DenyReason::RegistryUnavailable(_))));
    }
}
