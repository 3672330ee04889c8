use proptest::prelude::*;

use authchain_core::crypto::{self, seeded_rng, Ciphertext, KeyPair, SymmetricKey};
use authchain_core::tokens::{self, AccessToken, InvalidReason, SignedToken, TokenClaims, Verdict};

const K: SymmetricKey = SymmetricKey([0x5a; 32]);

fn scope_set() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,8}", 1..4)
}

fn claims() -> impl Strategy<Value = TokenClaims> {
    ("[a-z.]{1,12}", "[a-z0-9-]{1,12}", scope_set(), 0u64..1000, 1u64..1000, any::<[u8; 16]>()).prop_map(
        |(issuer, audience, scopes, issued_at, life, session_nonce)| TokenClaims {
            issuer,
            audience,
            scopes: scopes.into_iter().collect(),
            issued_at,
            expires_at: issued_at + life,
            session_nonce,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn aead_rejects_any_single_bit_flip(
        pt in prop::collection::vec(any::<u8>(), 0..96),
        seed in any::<u64>(),
        bit in any::<usize>(),
    ) {
        let c = crypto::encrypt(&K, &pt, b"ctx", &mut seeded_rng(seed));
        let mut bytes = c.to_bytes();
        let i = bit % (bytes.len() * 8);
        bytes[i / 8] ^= 1 << (i % 8);
        let flipped = Ciphertext::from_bytes(&bytes).unwrap();
        prop_assert!(crypto::decrypt(&K, &flipped, b"ctx").is_err());
        prop_assert_eq!(crypto::decrypt(&K, &c, b"ctx").unwrap(), pt);
    }

    #[test]
    fn any_byte_change_to_signed_token_is_rejected(
        cl in claims(),
        pos in any::<usize>(),
        delta in 1u8..=255,
    ) {
        let now = cl.issued_at;
        let audience = cl.audience.clone();
        let st = tokens::issue_token(cl, &SymmetricKey([3; 32]), &K).unwrap();
        let mut bytes = st.encode().unwrap();
        let i = pos % bytes.len();
        bytes[i] = bytes[i].wrapping_add(delta);
        // a mutation either breaks the encoding or the MAC
        if let Ok(m) = SignedToken::decode(&bytes) {
            prop_assert_eq!(tokens::verify_integrity(&m, &K, now, &audience), Verdict::Invalid(InvalidReason::BadMac));
        }
    }

    #[test]
    fn token_round_trips(cl in claims()) {
        let st = tokens::issue_token(cl, &SymmetricKey([1; 32]), &K).unwrap();
        let bytes = st.encode().unwrap();
        let back = SignedToken::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &st);
        prop_assert_eq!(AccessToken::decode(&st.token.encode().unwrap()).unwrap(), st.token.clone());
        prop_assert_eq!(back.digest().unwrap(), crypto::hash(&bytes));
    }

    #[test]
    fn expiry_is_exclusive(cl in claims()) {
        let (iat, exp, aud) = (cl.issued_at, cl.expires_at, cl.audience.clone());
        let st = tokens::issue_token(cl, &SymmetricKey([1; 32]), &K).unwrap();
        prop_assert!(tokens::verify_integrity(&st, &K, iat, &aud).is_valid());
        prop_assert!(tokens::verify_integrity(&st, &K, exp - 1, &aud).is_valid());
        prop_assert_eq!(tokens::verify_integrity(&st, &K, exp, &aud), Verdict::Invalid(InvalidReason::Expired));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pk_encryption_opens_only_for_recipient(pt in prop::collection::vec(any::<u8>(), 0..64), a in any::<[u8; 32]>(), b in any::<[u8; 32]>()) {
        prop_assume!(a != b);
        let (ka, kb) = (KeyPair::from_seed(&a), KeyPair::from_seed(&b));
        let c = crypto::pk_encrypt(&ka.public(), &pt, b"x", &mut seeded_rng(1));
        prop_assert_eq!(crypto::pk_decrypt(&ka, &c, b"x").unwrap(), pt);
        prop_assert!(crypto::pk_decrypt(&kb, &c, b"x").is_err());
        prop_assert!(crypto::pk_decrypt(&ka, &c, b"y").is_err());
    }
}
