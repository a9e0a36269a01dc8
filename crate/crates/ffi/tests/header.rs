//! The generated header must compile as C and as C++.

use std::path::Path;
use std::process::Command;

fn compiles(compiler: &str, lang: &str) -> Option<bool> {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sar.h");
    let status = Command::new(compiler)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
        .arg(&header)
        .status()
        .ok()?;
    Some(status.success())
}

#[test]
fn header_compiles() {
    let mut checked = 0;
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        match compiles(compiler, lang) {
            Some(ok) => {
                assert!(ok, "{compiler} rejected sar.h");
                checked += 1;
            }
            None => eprintln!("{compiler} not found; skipped"),
        }
    }
    if checked == 0 {
        eprintln!("no C compiler available; header not checked");
    }
}
