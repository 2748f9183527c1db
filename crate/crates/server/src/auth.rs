//! Username/password accounts with salted SHA-256 hashes and opaque bearer
//! tokens. Accounts persist in a small JSON sidecar next to the event log.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TOKEN_TTL_MS: i64 = 12 * 60 * 60 * 1000;
pub const ADMIN_USER: &str = "admin";

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("username {0} is taken")]
    UserExists(String),
    #[error("bad credentials")]
    BadCredentials,
    #[error("username must be 1-64 characters of letters, digits, '-', '_' or '.'")]
    BadUsername,
    #[error("password must not be empty")]
    EmptyPassword,
    #[error("missing or expired token")]
    Unauthenticated,
    #[error("could not persist accounts: {0}")]
    Storage(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Account {
    salt: String,
    hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub user_id: String,
    pub admin: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct IssuedToken {
    pub token: String,
    pub user_id: String,
    pub expires_at: i64,
}

pub struct AuthStore {
    path: Option<PathBuf>,
    accounts: RwLock<HashMap<String, Account>>,
    tokens: RwLock<HashMap<String, (String, i64)>>,
    admin_token: Option<String>,
}

fn hash_password(salt: &str, password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

fn random_hex(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::thread_rng().fill_bytes(&mut buf);
    hex::encode(buf)
}

fn valid_username(name: &str) -> bool {
    (1..=64).contains(&name.len())
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && name != ADMIN_USER
}

/// Constant-time string comparison for secrets.
fn same(a: &str, b: &str) -> bool {
    a.len() == b.len() && a.bytes().zip(b.bytes()).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl AuthStore {
    pub fn in_memory(admin_token: Option<String>) -> Self {
        AuthStore {
            path: None,
            accounts: RwLock::new(HashMap::new()),
            tokens: RwLock::new(HashMap::new()),
            admin_token: admin_token.filter(|t| !t.is_empty()),
        }
    }

    pub fn open(path: impl AsRef<Path>, admin_token: Option<String>) -> Result<Self, AuthError> {
        let path = path.as_ref().to_path_buf();
        let accounts = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => HashMap::new(),
            Err(e) => return Err(e.into()),
        };
        let mut store = AuthStore::in_memory(admin_token);
        store.path = Some(path);
        store.accounts = RwLock::new(accounts);
        Ok(store)
    }

    fn persist(&self, accounts: &HashMap<String, Account>) -> Result<(), AuthError> {
        if let Some(path) = &self.path {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, serde_json::to_vec_pretty(accounts).expect("accounts serialize"))?;
            fs::rename(&tmp, path)?;
        }
        Ok(())
    }

    pub fn register(&self, username: &str, password: &str) -> Result<(), AuthError> {
        if !valid_username(username) {
            return Err(AuthError::BadUsername);
        }
        if password.is_empty() {
            return Err(AuthError::EmptyPassword);
        }
        let mut accounts = self.accounts.write().unwrap();
        if accounts.contains_key(username) {
            return Err(AuthError::UserExists(username.to_string()));
        }
        let salt = random_hex(16);
        let hash = hash_password(&salt, password);
        accounts.insert(username.to_string(), Account { salt, hash });
        if let Err(e) = self.persist(&accounts) {
            accounts.remove(username);
            return Err(e);
        }
        Ok(())
    }

    pub fn login(&self, username: &str, password: &str, now_ms: i64) -> Result<IssuedToken, AuthError> {
        let ok = self
            .accounts
            .read()
            .unwrap()
            .get(username)
            .is_some_and(|a| same(&hash_password(&a.salt, password), &a.hash));
        if !ok {
            return Err(AuthError::BadCredentials);
        }
        let token = random_hex(32);
        let expires_at = now_ms + TOKEN_TTL_MS;
        let mut tokens = self.tokens.write().unwrap();
        tokens.retain(|_, (_, exp)| *exp > now_ms);
        tokens.insert(token.clone(), (username.to_string(), expires_at));
        Ok(IssuedToken { token, user_id: username.to_string(), expires_at })
    }

    pub fn logout(&self, token: &str) {
        self.tokens.write().unwrap().remove(token);
    }

    pub fn authenticate(&self, token: &str, now_ms: i64) -> Result<Principal, AuthError> {
        if let Some(admin) = &self.admin_token {
            if same(admin, token) {
                return Ok(Principal { user_id: ADMIN_USER.into(), admin: true });
            }
        }
        match self.tokens.read().unwrap().get(token) {
            Some((user, exp)) if *exp > now_ms => Ok(Principal { user_id: user.clone(), admin: false }),
            _ => Err(AuthError::Unauthenticated),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_login_and_expiry() {
        let a = AuthStore::in_memory(Some("root-secret".into()));
        a.register("t1", "pw").unwrap();
        assert!(matches!(a.register("t1", "other"), Err(AuthError::UserExists(_))));
        assert!(matches!(a.login("t1", "nope", 0), Err(AuthError::BadCredentials)));
        assert!(matches!(a.login("ghost", "pw", 0), Err(AuthError::BadCredentials)));
        let t = a.login("t1", "pw", 0).unwrap();
        assert_eq!(a.authenticate(&t.token, 1).unwrap(), Principal { user_id: "t1".into(), admin: false });
        assert!(a.authenticate(&t.token, TOKEN_TTL_MS).is_err());
        assert!(a.authenticate("root-secret", 0).unwrap().admin);
        assert!(matches!(a.register("admin", "x"), Err(AuthError::BadUsername)));
        assert!(matches!(a.register("a b", "x"), Err(AuthError::BadUsername)));
    }

    #[test]
    fn accounts_survive_reopen_and_store_no_plaintext() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("users.json");
        AuthStore::open(&path, None).unwrap().register("t1", "hunter2").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("hunter2"));
        let again = AuthStore::open(&path, None).unwrap();
        assert!(again.login("t1", "hunter2", 0).is_ok());
    }
}
