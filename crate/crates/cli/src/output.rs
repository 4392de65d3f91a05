//! Output files with a provenance header.

use std::path::Path;

use radt_core::Result;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_digest: String,
    pub seeds: Vec<u64>,
}

impl Provenance {
    pub fn new(config_digest: String, seeds: Vec<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config_digest,
            seeds,
        }
    }

    fn line(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "{} {} config_digest={} seeds={}",
            self.tool,
            self.version,
            self.config_digest,
            seeds.join(",")
        )
    }

    /// CSV body preceded by a `#` comment line.
    pub fn csv(&self, body: &str) -> String {
        format!("# {}\n{body}", self.line())
    }

    /// SVG document with a comment after the XML declaration.
    pub fn svg(&self, doc: &str) -> String {
        let (decl, rest) = doc.split_once('\n').unwrap_or((doc, ""));
        format!("{decl}\n<!-- {} -->\n{rest}", self.line())
    }

    /// Pretty JSON object with a `provenance` field followed by `body`'s fields.
    pub fn json<T: Serialize>(&self, body: &T) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            provenance: &'a Provenance,
            #[serde(flatten)]
            body: &'a T,
        }
        let mut s = serde_json::to_string_pretty(&Doc { provenance: self, body })?;
        s.push('\n');
        Ok(s)
    }
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| {
        radt_core::Error::Io(std::io::Error::new(e.kind(), format!("cannot write {}: {e}", path.display())))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers() {
        let p = Provenance::new("ab12".into(), vec![0, 3]);
        assert!(p.csv("x,y\n").starts_with("# radt-lab 0.1.0 config_digest=ab12 seeds=0,3\nx,y\n"));
        let svg = p.svg("<?xml version=\"1.0\"?>\n<svg/>\n");
        assert_eq!(svg, "<?xml version=\"1.0\"?>\n<!-- radt-lab 0.1.0 config_digest=ab12 seeds=0,3 -->\n<svg/>\n");
        #[derive(Serialize)]
        struct B {
            value: u32,
        }
        let j: serde_json::Value = serde_json::from_str(&p.json(&B { value: 4 }).unwrap()).unwrap();
        assert_eq!(j["provenance"]["config_digest"], "ab12");
        assert_eq!(j["value"], 4);
    }
}
