//! Accounts and API credentials. Secrets are 32 random bytes shown once in
//! base64; the store only keeps their sha256.

use std::collections::BTreeSet;

use argon2::password_hash::{rand_core::OsRng, PasswordHasher, SaltString};
use argon2::Argon2;
use base64::Engine;
use rand::RngCore;
use sha2::{Digest, Sha256};

use cvmg_core::ids::{CredentialId, UserId};
use cvmg_core::store::{ApiCredential, Store, UserAccount};
use cvmg_core::{Error, Principal, Result};

/// Scheme name in `Authorization: CVMG <id>:<secret>`.
pub const SCHEME: &str = "CVMG";

pub fn secret_digest(secret: &str) -> String {
    hex::encode(Sha256::digest(secret.as_bytes()))
}

fn new_secret() -> String {
    let mut raw = [0u8; 32];
    rand::rng().fill_bytes(&mut raw);
    base64::engine::general_purpose::STANDARD.encode(raw)
}

pub fn add_user(store: &Store, username: &str, password: &str, groups: BTreeSet<String>) -> Result<UserAccount> {
    if username.trim().is_empty() || username.contains(char::is_whitespace) {
        return Err(Error::InvalidValue(format!("invalid username {username:?}")));
    }
    let salt = SaltString::generate(&mut OsRng);
    let password_digest = Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .map_err(|e| Error::Internal(format!("password hashing: {e}")))?
        .to_string();
    let user = UserAccount {
        id: UserId::random(),
        username: username.to_owned(),
        password_digest,
        groups,
    };
    store.insert_user(user.clone())?;
    Ok(user)
}

/// Creates a credential for `owner` and returns it with its secret.
pub fn issue_credential(store: &Store, owner: &str) -> Result<(ApiCredential, String)> {
    let secret = new_secret();
    let cred = ApiCredential {
        id: CredentialId::random(),
        owner: owner.to_owned(),
        secret_digest: secret_digest(&secret),
        created_at: store.now(),
        revoked: false,
    };
    store.insert_credential(cred.clone())?;
    Ok((cred, secret))
}

/// Splits an `Authorization` header value into credential id and secret.
pub fn parse_authorization(header: &str) -> Option<(CredentialId, &str)> {
    let (scheme, rest) = header.trim().split_once(' ')?;
    if !scheme.eq_ignore_ascii_case(SCHEME) {
        return None;
    }
    let (id, secret) = rest.trim().split_once(':')?;
    if id.is_empty() || secret.is_empty() {
        return None;
    }
    Some((CredentialId::from(id), secret))
}

pub fn authenticate(store: &Store, header: Option<&str>) -> Result<Principal> {
    let (id, secret) = header.and_then(parse_authorization).ok_or(Error::Unauthenticated)?;
    let cred = store.credential(&id)?.ok_or(Error::Unauthenticated)?;
    if cred.revoked || !digests_match(&cred.secret_digest, &secret_digest(secret)) {
        return Err(Error::Unauthenticated);
    }
    let user = store.user(&cred.owner)?.ok_or(Error::Unauthenticated)?;
    Ok(user.principal())
}

fn digests_match(a: &str, b: &str) -> bool {
    a.len() == b.len() && a.bytes().zip(b.bytes()).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use cvmg_core::clock::system_clock;

    fn store_with_alice() -> Store {
        let store = Store::memory(system_clock());
        add_user(&store, "alice", "pw", BTreeSet::from(["physics".to_owned()])).unwrap();
        store
    }

    fn header(id: &CredentialId, secret: &str) -> String {
        format!("CVMG {id}:{secret}")
    }

    #[test]
    fn valid_pair_authenticates_with_groups() {
        let store = store_with_alice();
        let (cred, secret) = issue_credential(&store, "alice").unwrap();
        let p = authenticate(&store, Some(&header(&cred.id, &secret))).unwrap();
        assert_eq!(p.user, "alice");
        assert!(p.groups.contains("physics"));
        assert_eq!(base64::engine::general_purpose::STANDARD.decode(&secret).unwrap().len(), 32);
        assert_ne!(cred.secret_digest, secret);
    }

    #[test]
    fn wrong_secret_and_garbage_are_rejected() {
        let store = store_with_alice();
        let (cred, _) = issue_credential(&store, "alice").unwrap();
        for h in [
            Some(header(&cred.id, "nope")),
            Some(format!("Basic {}:x", cred.id)),
            Some("CVMG".to_owned()),
            Some("CVMG :".to_owned()),
            None,
        ] {
            assert_eq!(authenticate(&store, h.as_deref()), Err(Error::Unauthenticated), "{h:?}");
        }
    }

    #[test]
    fn revoking_one_leaves_the_other() {
        let store = store_with_alice();
        let (a, sa) = issue_credential(&store, "alice").unwrap();
        let (b, sb) = issue_credential(&store, "alice").unwrap();
        store.revoke_credential(&a.id, "alice").unwrap();
        store.revoke_credential(&a.id, "alice").unwrap();
        assert_eq!(authenticate(&store, Some(&header(&a.id, &sa))), Err(Error::Unauthenticated));
        assert!(authenticate(&store, Some(&header(&b.id, &sb))).is_ok());
    }

    #[test]
    fn password_is_not_stored_in_clear() {
        let store = store_with_alice();
        let user = store.user("alice").unwrap().unwrap();
        assert!(user.password_digest.starts_with("$argon2"));
        assert!(add_user(&store, "alice", "pw", BTreeSet::new()).is_err());
    }
}
