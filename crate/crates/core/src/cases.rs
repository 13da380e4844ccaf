//! IEEE test cases bundled with the crate.

const CASES: [(&str, &str); 4] = [
    ("case9", include_str!("../data/case9.m")),
    ("case14", include_str!("../data/case14.m")),
    ("case30", include_str!("../data/case30.m")),
    ("case118", include_str!("../data/case118.m")),
];

/// Names accepted by [`builtin`].
pub fn names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|(n, _)| *n)
}

/// Case-file text of a bundled case.
pub fn builtin(name: &str) -> Option<&'static str> {
    CASES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parses a bundled case.
///
/// # Panics
///
/// If `name` is not bundled.
pub fn network(name: &str) -> crate::Network {
    let text = builtin(name).unwrap_or_else(|| panic!("no bundled case `{name}`"));
    crate::parse_case(text).expect("bundled cases parse")
}
