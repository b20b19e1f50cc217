//! Clinician accounts and bearer tokens.
//!
//! The credentials file holds one `user:salt_hex:sha256_hex` line per
//! account, where the digest covers the salt bytes followed by the secret.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("missing bearer token")]
    MissingToken,
    #[error("unknown or expired token")]
    InvalidToken,
    #[error("credentials file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("random source failed: {0}")]
    Random(String),
    #[error("reading credentials: {0}")]
    Io(#[from] std::io::Error),
}

struct Account {
    salt: Vec<u8>,
    digest: [u8; 32],
}

fn digest(salt: &[u8], secret: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(secret.as_bytes());
    h.finalize().into()
}

fn random_bytes<const N: usize>() -> Result<[u8; N], AuthError> {
    let mut b = [0u8; N];
    getrandom::fill(&mut b).map_err(|e| AuthError::Random(e.to_string()))?;
    Ok(b)
}

/// Compares without an early exit so the time does not depend on where the
/// inputs first differ.
fn same_bytes(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// A credentials line for `user` with a fresh random salt.
pub fn credential_line(user: &str, secret: &str) -> Result<String, AuthError> {
    if user.is_empty() || user.contains(':') || user.contains(char::is_whitespace) {
        return Err(AuthError::Parse {
            line: 0,
            message: format!("user name `{user}` must be non-empty without `:` or whitespace"),
        });
    }
    let salt = random_bytes::<16>()?;
    Ok(format!("{user}:{}:{}", hex::encode(salt), hex::encode(digest(&salt, secret))))
}

pub struct Authenticator {
    accounts: HashMap<String, Account>,
    tokens: Mutex<HashMap<String, (String, Instant)>>,
    ttl: Duration,
    dummy: Account,
}

impl Authenticator {
    pub fn parse(text: &str, ttl: Duration) -> Result<Self, AuthError> {
        let mut accounts = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: &str| AuthError::Parse {
                line: i + 1,
                message: message.to_string(),
            };
            let parts: Vec<&str> = line.split(':').collect();
            let [user, salt, hash] = parts.as_slice() else {
                return Err(bad("expected user:salt_hex:sha256_hex"));
            };
            let salt = hex::decode(salt).map_err(|_| bad("salt is not hex"))?;
            let digest: [u8; 32] = hex::decode(hash)
                .ok()
                .and_then(|d| d.try_into().ok())
                .ok_or_else(|| bad("digest must be 64 hex digits"))?;
            if accounts.insert(user.to_string(), Account { salt, digest }).is_some() {
                return Err(bad("duplicate user"));
            }
        }
        Ok(Authenticator {
            accounts,
            tokens: Mutex::new(HashMap::new()),
            ttl,
            dummy: Account {
                salt: vec![0; 16],
                digest: [0; 32],
            },
        })
    }

    pub fn load(path: &Path, ttl: Duration) -> Result<Self, AuthError> {
        Self::parse(&std::fs::read_to_string(path)?, ttl)
    }

    pub fn user_count(&self) -> usize {
        self.accounts.len()
    }

    /// Checks the secret and issues a token. Unknown users cost the same
    /// hash and comparison as known ones.
    pub fn login(&self, user: &str, secret: &str) -> Result<String, AuthError> {
        let (account, known) = match self.accounts.get(user) {
            Some(a) => (a, true),
            None => (&self.dummy, false),
        };
        let ok = same_bytes(&digest(&account.salt, secret), &account.digest);
        if !(ok && known) {
            return Err(AuthError::InvalidCredentials);
        }
        let token = hex::encode(random_bytes::<32>()?);
        let mut tokens = self.tokens.lock().unwrap_or_else(|p| p.into_inner());
        let now = Instant::now();
        tokens.retain(|_, (_, exp)| *exp > now);
        tokens.insert(token.clone(), (user.to_string(), now + self.ttl));
        Ok(token)
    }

    /// The user a live token belongs to.
    pub fn verify(&self, token: &str) -> Result<String, AuthError> {
        let mut tokens = self.tokens.lock().unwrap_or_else(|p| p.into_inner());
        match tokens.get(token) {
            Some((user, exp)) if *exp > Instant::now() => Ok(user.clone()),
            Some(_) => {
                tokens.remove(token);
                Err(AuthError::InvalidToken)
            }
            None => Err(AuthError::InvalidToken),
        }
    }

    pub fn revoke(&self, token: &str) -> bool {
        self.tokens.lock().unwrap_or_else(|p| p.into_inner()).remove(token).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn auth(ttl: Duration) -> Authenticator {
        let text = format!("# staff\n{}\n\n{}\n", credential_line("ana", "s3cret").unwrap(), credential_line("bo", "pw").unwrap());
        Authenticator::parse(&text, ttl).unwrap()
    }

    #[test]
    fn login_verify_revoke() {
        let a = auth(Duration::from_secs(60));
        assert_eq!(a.user_count(), 2);
        let t = a.login("ana", "s3cret").unwrap();
        assert_eq!(t.len(), 64);
        assert_eq!(a.verify(&t).unwrap(), "ana");
        assert!(a.revoke(&t));
        assert!(matches!(a.verify(&t), Err(AuthError::InvalidToken)));
    }

    #[test]
    fn rejects_wrong_secret_and_unknown_user() {
        let a = auth(Duration::from_secs(60));
        assert!(matches!(a.login("ana", "nope"), Err(AuthError::InvalidCredentials)));
        assert!(matches!(a.login("zed", "s3cret"), Err(AuthError::InvalidCredentials)));
    }

    #[test]
    fn tokens_expire() {
        let a = auth(Duration::from_millis(20));
        let t = a.login("bo", "pw").unwrap();
        std::thread::sleep(Duration::from_millis(40));
        assert!(a.verify(&t).is_err());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = Authenticator::parse("ok:00:zz\n", Duration::ZERO).err().unwrap();
        assert!(matches!(e, AuthError::Parse { line: 1, .. }));
        assert!(Authenticator::parse("a:b\n", Duration::ZERO).is_err());
    }
}
