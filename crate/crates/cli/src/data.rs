//! Reading and writing prepared dataset directories.
//!
//! `prepare` lays out a directory as:
//!
//! ```text
//! catalog.tsv   item_id<TAB>label1|label2|...   (dense-index order)
//! train.tsv     user<TAB>i1,i2,...<TAB>target   (dense indices)
//! valid.tsv
//! test.tsv
//! stats.json    corpus summary incl. max_len
//! ```

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use dacsr_core::catalog::{build_catalog, parse_attribute_records, AttributeFileFormat};
use dacsr_core::ingest::{split_pairs_from_str, split_pairs_to_string, DatasetSplit, SplitStats};

pub fn write_prepared(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("catalog.tsv"), split.catalog.to_attribute_file())?;
    fs::write(dir.join("train.tsv"), split_pairs_to_string(&split.train))?;
    fs::write(dir.join("valid.tsv"), split_pairs_to_string(&split.validation))?;
    fs::write(dir.join("test.tsv"), split_pairs_to_string(&split.test))?;
    let stats = serde_json::to_string_pretty(&split.stats)?;
    fs::write(dir.join("stats.json"), stats)?;
    Ok(())
}

pub fn load_prepared(dir: &Path) -> Result<DatasetSplit> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(dir.join(name))
            .with_context(|| format!("reading {}/{name}", dir.display()))
    };
    let records = parse_attribute_records(&read("catalog.tsv")?, AttributeFileFormat::Tsv)?;
    let catalog = build_catalog(&records)?;
    let train = split_pairs_from_str(&read("train.tsv")?, &catalog)?;
    let validation = split_pairs_from_str(&read("valid.tsv")?, &catalog)?;
    let test = split_pairs_from_str(&read("test.tsv")?, &catalog)?;
    let stats: SplitStats = serde_json::from_str(&read("stats.json")?)
        .with_context(|| format!("parsing {}/stats.json", dir.display()))?;
    let max_len = stats.max_len;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        catalog,
        max_len,
        stats,
    })
}
