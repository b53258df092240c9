//! Salted password hashes and HTTP basic-auth checks.
//!
//! Stored form: `sha256$<salt hex>$<digest hex>` where the digest is
//! `sha256(salt || password)`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const SCHEME: &str = "sha256";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("password hash must look like `sha256$<salt>$<digest>`")]
    MalformedHash,
    #[error("unsupported hash scheme `{0}`")]
    UnsupportedScheme(String),
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PasswordHash {
    salt: Vec<u8>,
    digest: [u8; 32],
}

impl std::fmt::Debug for PasswordHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PasswordHash(<redacted>)")
    }
}

impl PasswordHash {
    pub fn new(password: &str, salt: &[u8]) -> Self {
        Self {
            salt: salt.to_vec(),
            digest: digest(salt, password),
        }
    }

    pub fn parse(encoded: &str) -> Result<Self, AuthError> {
        let mut parts = encoded.split('$');
        let (Some(scheme), Some(salt), Some(hash), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(AuthError::MalformedHash);
        };
        if scheme != SCHEME {
            return Err(AuthError::UnsupportedScheme(scheme.to_string()));
        }
        let salt = hex::decode(salt).map_err(|_| AuthError::MalformedHash)?;
        let digest: [u8; 32] = hex::decode(hash)
            .ok()
            .and_then(|d| d.try_into().ok())
            .ok_or(AuthError::MalformedHash)?;
        Ok(Self { salt, digest })
    }

    pub fn encode(&self) -> String {
        format!("{SCHEME}${}${}", hex::encode(&self.salt), hex::encode(self.digest))
    }

    pub fn verify(&self, password: &str) -> bool {
        let candidate = digest(&self.salt, password);
        // Compare without early exit.
        candidate
            .iter()
            .zip(self.digest.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

impl TryFrom<String> for PasswordHash {
    type Error = AuthError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<PasswordHash> for String {
    fn from(value: PasswordHash) -> Self {
        value.encode()
    }
}

fn digest(salt: &[u8], password: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(password.as_bytes());
    hasher.finalize().into()
}

/// One user allowed through basic auth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasicCredential {
    pub username: String,
    pub password_hash: PasswordHash,
}

/// Splits an `Authorization: Basic ...` header value into user and password.
pub fn decode_basic_header(value: &str) -> Option<(String, String)> {
    let (scheme, token) = value.trim().split_once(' ')?;
    if !scheme.eq_ignore_ascii_case("basic") {
        return None;
    }
    let raw = STANDARD.decode(token.trim()).ok()?;
    let text = String::from_utf8(raw).ok()?;
    let (user, pass) = text.split_once(':')?;
    Some((user.to_string(), pass.to_string()))
}

pub fn encode_basic_header(user: &str, password: &str) -> String {
    format!("Basic {}", STANDARD.encode(format!("{user}:{password}")))
}

/// True when `header` carries credentials matching one of `users`.
/// An empty user list disables auth.
pub fn check_basic(users: &[BasicCredential], header: Option<&str>) -> bool {
    if users.is_empty() {
        return true;
    }
    let Some((user, pass)) = header.and_then(decode_basic_header) else {
        return false;
    };
    users
        .iter()
        .any(|c| c.username == user && c.password_hash.verify(&pass))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_round_trip() {
        let h = PasswordHash::new("s3cret", b"pepper");
        let parsed = PasswordHash::parse(&h.encode()).unwrap();
        assert_eq!(parsed, h);
        assert!(parsed.verify("s3cret"));
        assert!(!parsed.verify("s3cret "));
        assert!(!format!("{h:?}").contains("s3cret"));
    }

    #[test]
    fn malformed_hashes() {
        assert_eq!(PasswordHash::parse("abc"), Err(AuthError::MalformedHash));
        assert_eq!(
            PasswordHash::parse("md5$00$00"),
            Err(AuthError::UnsupportedScheme("md5".into()))
        );
        assert_eq!(PasswordHash::parse("sha256$00$0011"), Err(AuthError::MalformedHash));
    }

    #[test]
    fn basic_header_check() {
        let users = vec![BasicCredential {
            username: "prom".into(),
            password_hash: PasswordHash::new("pw", b"salt"),
        }];
        let good = encode_basic_header("prom", "pw");
        let bad = encode_basic_header("prom", "nope");
        assert!(check_basic(&users, Some(&good)));
        assert!(!check_basic(&users, Some(&bad)));
        assert!(!check_basic(&users, None));
        assert!(!check_basic(&users, Some("Bearer x")));
        assert!(check_basic(&[], None));
        assert_eq!(decode_basic_header(&good), Some(("prom".into(), "pw".into())));
    }
}
