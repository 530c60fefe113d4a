//! Path-component obfuscation. Twins only ever see keyed tokens.

use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::op::{NameToken, TOKEN_LEN};

#[derive(Clone)]
pub struct NameKey([u8; 32]);

impl NameKey {
    pub fn new(key: [u8; 32]) -> Self {
        NameKey(key)
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// HMAC-SHA256 of the component, truncated to the token length.
    pub fn token(&self, component: &str) -> NameToken {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(component.as_bytes());
        let full = mac.finalize().into_bytes();
        let mut t = [0u8; TOKEN_LEN];
        t.copy_from_slice(&full[..TOKEN_LEN]);
        NameToken(t)
    }
}

impl std::fmt::Debug for NameKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("NameKey(..)")
    }
}
