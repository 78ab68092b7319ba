//! Canonical amiconfig user-data rendering.
//!
//! ```text
//! [amiconfig]
//! plugins = condor ssh
//!
//! [condor]
//! master=head01
//!
//! [ssh]
//! key=...
//! ```
//!
//! Plugins and keys are emitted in lexicographic order, every line ends with
//! `\n`, and only enabled plugins get a section.

use std::collections::BTreeSet;
use std::fmt::Write;

use sha2::{Digest, Sha256};

use super::Sections;

pub const HEADER_SECTION: &str = "[amiconfig]";

pub fn render(enabled_plugins: &[String], sections: &Sections) -> String {
    let plugins: BTreeSet<&str> = enabled_plugins.iter().map(String::as_str).collect();
    let mut out = String::new();
    out.push_str(HEADER_SECTION);
    out.push('\n');
    if plugins.is_empty() {
        out.push_str("plugins =\n");
    } else {
        out.push_str("plugins = ");
        out.push_str(&plugins.iter().copied().collect::<Vec<_>>().join(" "));
        out.push('\n');
    }
    for plugin in plugins {
        let _ = write!(out, "\n[{plugin}]\n");
        if let Some(section) = sections.get(plugin) {
            for (key, value) in section {
                let _ = writeln!(out, "{key}={value}");
            }
        }
    }
    out
}

/// Hex SHA-256 of a rendering.
pub fn checksum(rendered: &str) -> String {
    hex::encode(Sha256::digest(rendered.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use super::super::Section;

    fn sections(entries: &[(&str, &[(&str, &str)])]) -> Sections {
        entries
            .iter()
            .map(|(plugin, kv)| {
                let section: BTreeMap<String, String> = kv
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect();
                (plugin.to_string(), section)
            })
            .collect()
    }

    #[test]
    fn empty_context_renders_header_only() {
        assert_eq!(render(&[], &Sections::new()), "[amiconfig]\nplugins =\n");
    }

    #[test]
    fn single_plugin_golden() {
        let s = sections(&[("condor", &[("master", "head01")])]);
        assert_eq!(
            render(&["condor".into()], &s),
            "[amiconfig]\nplugins = condor\n\n[condor]\nmaster=head01\n"
        );
    }

    #[test]
    fn plugins_and_keys_sorted_and_disabled_sections_omitted() {
        let s = sections(&[
            ("ssh", &[("port", "22"), ("key", "abc")]),
            ("condor", &[("master", "h")]),
            ("cvmfs", &[("repos", "x")]),
        ]);
        let text = render(&["ssh".into(), "condor".into()], &s);
        assert_eq!(
            text,
            "[amiconfig]\nplugins = condor ssh\n\n[condor]\nmaster=h\n\n[ssh]\nkey=abc\nport=22\n"
        );
    }

    #[test]
    fn checksum_is_sha256_hex() {
        // sha256("[amiconfig]\nplugins =\n")
        let sum = checksum("[amiconfig]\nplugins =\n");
        assert_eq!(sum.len(), 64);
        assert_eq!(sum, hex::encode(Sha256::digest(b"[amiconfig]\nplugins =\n")));
    }

    mod oracle {
        use super::*;
        use ini::{Ini, ParseOption};
        use proptest::prelude::*;

        fn body() -> impl Strategy<Value = (Sections, Vec<String>)> {
            let section = prop::collection::btree_map("[a-z0-9_.-]{1,8}", "[A-Za-z0-9._/:-]([A-Za-z0-9 ._/:-]{0,10}[A-Za-z0-9._/:-])?", 0..5);
            prop::collection::btree_map("[a-z][a-z0-9_-]{0,7}", section, 0..5).prop_flat_map(|sections| {
                let names: Vec<String> = sections.keys().cloned().collect();
                let n = names.len();
                (Just(sections), prop::sample::subsequence(names, 0..=n).prop_shuffle())
            })
        }

        proptest! {
            #[test]
            fn an_ini_parser_reads_back_the_enabled_sections((sections, enabled) in body()) {
                let text = render(&enabled, &sections);
                let opt = ParseOption { enabled_quote: false, enabled_escape: false, ..ParseOption::default() };
                let parsed = Ini::load_from_str_opt(&text, opt).unwrap();
                let mut sorted = enabled.clone();
                sorted.sort();
                let header = parsed.section(Some("amiconfig")).unwrap();
                prop_assert_eq!(header.get("plugins").unwrap_or(""), sorted.join(" "));
                for plugin in &sorted {
                    let got: Section = parsed
                        .section(Some(plugin.as_str()))
                        .unwrap()
                        .iter()
                        .map(|(k, v)| (k.to_owned(), v.to_owned()))
                        .collect();
                    prop_assert_eq!(&got, &sections[plugin]);
                }
                let named = parsed.sections().flatten().count();
                prop_assert_eq!(named, sorted.len() + 1);
            }
        }
    }
}
