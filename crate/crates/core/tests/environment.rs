use policybank::environment::{builtin_domain, export_domain, load_domain, BUILTIN_DOMAINS};

#[test]
fn builtin_bundles_validate() {
    for name in BUILTIN_DOMAINS {
        let bundle = builtin_domain(name).unwrap();
        assert_eq!(bundle.validate(), Vec::<String>::new(), "{name}");
        assert!(!bundle.gaps.is_empty());
        for gap in &bundle.gaps {
            assert!(
                bundle.policy_text.contains(&gap.flawed_clause),
                "{}: flawed clause not in policy",
                gap.gap_id
            );
        }
    }
}

#[test]
fn export_then_load_round_trips() {
    for name in BUILTIN_DOMAINS {
        let bundle = builtin_domain(name).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_domain(&bundle, dir.path()).unwrap();
        let loaded = load_domain(dir.path()).unwrap();
        assert_eq!(loaded, bundle, "{name}");
    }
}

#[test]
fn loading_a_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_domain(&dir.path().join("absent")).is_err());
}

#[test]
fn unknown_builtin_is_an_error() {
    assert!(builtin_domain("atlantis").is_err());
}
