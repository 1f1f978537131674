//! Kernel bundles: a single script per kernel made of the worker runtime
//! and the kernel source, identified by a content hash.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::kernels;

const RUNTIME_JS: &str = include_str!("../assets/runtime.js");

const BUILTIN: [(&str, &str); 3] = [
    (kernels::ADD, include_str!("../assets/kernels/add.js")),
    (kernels::MONTE_CARLO, include_str!("../assets/kernels/monte-carlo.js")),
    (kernels::MANDELBROT, include_str!("../assets/kernels/mandelbrot.js")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub kernel_id: String,
    pub body: String,
    /// Hex SHA-256 of `body`; served as the entity tag.
    pub hash: String,
}

impl Bundle {
    pub fn build(kernel_id: &str, kernel_source: &str) -> Self {
        let mut body = String::new();
        body.push_str(&minify(RUNTIME_JS));
        body.push_str(&format!("const BUNDLE_KERNEL={};\n", serde_json::Value::from(kernel_id)));
        body.push_str(&minify(kernel_source));
        let hash = hex::encode(Sha256::digest(body.as_bytes()));
        Self {
            kernel_id: kernel_id.to_string(),
            body,
            hash,
        }
    }

    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }
}

/// Drops whole-line comments, blank lines and indentation.
pub fn minify(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    for line in source.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("//") {
            continue;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct BundleRegistry {
    bundles: BTreeMap<String, Arc<Bundle>>,
}

impl BundleRegistry {
    pub fn builtin() -> Self {
        let mut r = Self::default();
        for (id, src) in BUILTIN {
            r.insert(Bundle::build(id, src));
        }
        r
    }

    /// Built-ins plus every `<kernel_id>.js` in `dir`; files override
    /// built-ins of the same id.
    pub fn with_dir(dir: &Path) -> Result<Self, ConfigError> {
        let mut r = Self::builtin();
        let io = |source| ConfigError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(io)?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "js"))
            .collect();
        paths.sort();
        for p in paths {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let src = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            r.insert(Bundle::build(&id, &src));
        }
        Ok(r)
    }

    pub fn insert(&mut self, bundle: Bundle) {
        self.bundles.insert(bundle.kernel_id.clone(), Arc::new(bundle));
    }

    pub fn get(&self, kernel_id: &str) -> Option<Arc<Bundle>> {
        self.bundles.get(kernel_id).cloned()
    }

    pub fn kernel_ids(&self) -> impl Iterator<Item = &str> {
        self.bundles.keys().map(String::as_str)
    }
}
