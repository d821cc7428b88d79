//! Catalog files: `title<TAB>Root > Child > ... > Leaf`, one product per
//! line. A leading block of lines starting with `"# "` carries artifact
//! metadata and is skipped; comment handling stops at the first data line so
//! titles beginning with `#` deeper in the file are not swallowed.

use std::collections::HashMap;
use std::path::Path;

use crate::taxonomy::TaxonomyGraph;

use super::{CategoryPath, CorpusError, Product};

/// Outcome of loading a catalog TSV.
#[derive(Debug)]
pub struct CatalogLoad {
    pub products: Vec<Product>,
    /// Taxonomy built from the union of all loaded gold paths.
    pub taxonomy: TaxonomyGraph,
    pub report: LoadReport,
}

/// Per-file data quality findings.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct LoadReport {
    pub data_lines: usize,
    /// Rejected lines as (1-based line number, reason).
    pub malformed: Vec<(usize, String)>,
    /// Exact (title, path) duplicates dropped; only counted when
    /// deduplication is on.
    pub duplicates_removed: usize,
    /// Distinct titles that appear with two or more different gold paths.
    /// Such products are all kept.
    pub conflicting_titles: usize,
}

/// Load a catalog. Malformed lines are rejected and reported, not fatal;
/// only an unreadable file is an error. With `dedup` set, repeated
/// (title, path) lines collapse to their first occurrence.
pub fn load_catalog_tsv(path: &Path, dedup: bool) -> Result<CatalogLoad, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::UnreadableCatalog {
        path: path.display().to_string(),
        source,
    })?;
    let mut report = LoadReport::default();
    let mut products: Vec<Product> = Vec::new();
    let mut seen_pairs: HashMap<(String, String), usize> = HashMap::new();
    let mut in_header = true;
    for (lineno, raw_line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if in_header && line.starts_with("# ") {
            continue;
        }
        in_header = false;
        if line.is_empty() {
            continue;
        }
        report.data_lines += 1;
        let mut fields = line.split('\t');
        let (title, path_str) = match (fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(p), None) => (t, p),
            (_, None, _) => {
                report.malformed.push((lineno, "no tab separator".into()));
                continue;
            }
            _ => {
                report
                    .malformed
                    .push((lineno, "more than one tab separator".into()));
                continue;
            }
        };
        let gold_path = match CategoryPath::parse(path_str) {
            Ok(p) => p,
            Err(e) => {
                report.malformed.push((lineno, e.to_string()));
                continue;
            }
        };
        if dedup {
            let key = (title.to_owned(), gold_path.serialize());
            if seen_pairs.contains_key(&key) {
                report.duplicates_removed += 1;
                continue;
            }
            seen_pairs.insert(key, lineno);
        }
        match Product::new(products.len(), title, gold_path) {
            Ok(p) => products.push(p),
            Err(e) => report.malformed.push((lineno, e.to_string())),
        }
    }

    // Duplicate titles pointing at different paths are kept verbatim; the
    // report surfaces how many titles are ambiguous.
    let mut by_title: HashMap<&str, std::collections::HashSet<String>> = HashMap::new();
    for p in &products {
        by_title
            .entry(p.raw_title.as_str())
            .or_default()
            .insert(p.gold_path.serialize());
    }
    report.conflicting_titles = by_title.values().filter(|s| s.len() > 1).count();

    let taxonomy = TaxonomyGraph::from_paths(products.iter().map(|p| &p.gold_path));
    Ok(CatalogLoad {
        products,
        taxonomy,
        report,
    })
}

/// Write a catalog in the loader's format, prefixed with metadata comment
/// lines (one `"# "` line per entry).
pub fn write_catalog_tsv(
    products: &[Product],
    path: &Path,
    meta: &[String],
) -> Result<(), CorpusError> {
    let mut out = String::new();
    for m in meta {
        out.push_str("# ");
        out.push_str(m);
        out.push('\n');
    }
    for p in products {
        out.push_str(&p.raw_title);
        out.push('\t');
        out.push_str(&p.gold_path.serialize());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CorpusError::UnwritableFile {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_products_and_builds_taxonomy() {
        let f = write_tmp(
            "# config_hash=deadbeef seed=1\n\
             Pancake Mix 24 OZ\tFood > Breakfast > Pancake Mixes\n\
             Maple Syrup\tFood > Breakfast > Syrups\n",
        );
        let load = load_catalog_tsv(f.path(), false).unwrap();
        assert_eq!(load.products.len(), 2);
        assert_eq!(load.report.data_lines, 2);
        assert!(load.report.malformed.is_empty());
        assert_eq!(load.products[0].id, 0);
        assert_eq!(
            load.products[0].title_tokens,
            vec!["pancake", "mix", "24", "oz"]
        );
        assert!(load.taxonomy.contains_node("Food"));
        assert!(load.taxonomy.contains_node("Pancake Mixes"));
    }

    #[test]
    fn reports_malformed_lines_with_numbers() {
        let f = write_tmp(
            "Good\tA > B\n\
             no tab here\n\
             Tabby\tA > B\textra\n\
             Trailing\tA > \n\
             Empty path\t\n\
             Repeat\tA > A\n",
        );
        let load = load_catalog_tsv(f.path(), false).unwrap();
        assert_eq!(load.products.len(), 1);
        let lines: Vec<usize> = load.report.malformed.iter().map(|(n, _)| *n).collect();
        assert_eq!(lines, vec![2, 3, 4, 5, 6]);
        assert!(load.report.malformed[0].1.contains("tab"));
    }

    #[test]
    fn dedup_flag_collapses_exact_duplicates() {
        let content = "A thing\tX > Y\nA thing\tX > Y\nA thing\tX > Z\n";
        let with = load_catalog_tsv(write_tmp(content).path(), true).unwrap();
        assert_eq!(with.products.len(), 2);
        assert_eq!(with.report.duplicates_removed, 1);
        assert_eq!(with.report.conflicting_titles, 1);

        let without = load_catalog_tsv(write_tmp(content).path(), false).unwrap();
        assert_eq!(without.products.len(), 3);
        assert_eq!(without.report.duplicates_removed, 0);
        assert_eq!(without.report.conflicting_titles, 1);
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let missing = Path::new("/definitely/not/here.tsv");
        assert!(matches!(
            load_catalog_tsv(missing, false),
            Err(CorpusError::UnreadableCatalog { .. })
        ));
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.tsv");
        let products = vec![
            Product::new(0, "Pancake Mix", CategoryPath::parse("Food > Breakfast").unwrap())
                .unwrap(),
            Product::new(1, "# odd title", CategoryPath::parse("Misc").unwrap()).unwrap(),
        ];
        write_catalog_tsv(&products, &path, &["config_hash=ff seed=3".into()]).unwrap();
        let load = load_catalog_tsv(&path, false).unwrap();
        assert_eq!(load.products.len(), 2);
        assert_eq!(load.products[1].raw_title, "# odd title");
        assert_eq!(load.products, products);
    }
}
