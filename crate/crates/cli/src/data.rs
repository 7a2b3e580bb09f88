//! Reading splits, descriptions and corpora from disk.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use kepler_core::dataset::{DataSplit, EntityCatalog, Setting};
use kepler_core::kg::KnowledgeGraph;
use kepler_core::train::CorpusLines;

use crate::CliError;

pub const DESCRIPTIONS_FILE: &str = "descriptions.txt";
pub const RELATION_DESCRIPTIONS_FILE: &str = "relation_descriptions.txt";

pub fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// `explicit` if given, else `dir/name` when that file exists.
pub fn in_dir_or(explicit: Option<&String>, dir: Option<&Path>, name: &str) -> Option<PathBuf> {
    match explicit {
        Some(p) => Some(PathBuf::from(p)),
        None => dir.map(|d| d.join(name)).filter(|p| p.is_file()),
    }
}

/// The setting recorded in `dir/stats.txt`, if any.
pub fn recorded_setting(dir: &Path) -> Result<Option<Setting>, CliError> {
    let path = dir.join("stats.txt");
    if !path.is_file() {
        return Ok(None);
    }
    for line in open(&path)?.lines() {
        let line = line.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if let Some(value) = line.strip_prefix("setting\t") {
            return Ok(Some(value.trim().parse()?));
        }
    }
    Ok(None)
}

/// Reads a split directory. An explicit setting wins over the recorded one.
pub fn read_split(dir: &Path, setting: Option<Setting>) -> Result<DataSplit, CliError> {
    let setting = match setting {
        Some(s) => s,
        None => recorded_setting(dir)?.unwrap_or(Setting::Transductive),
    };
    Ok(DataSplit::read_dir(dir, setting)?)
}

pub fn read_graph(path: &Path) -> Result<KnowledgeGraph, CliError> {
    Ok(KnowledgeGraph::from_reader(open(path)?)?)
}

/// Entity descriptions plus optional relation descriptions.
pub fn read_catalog(descriptions: &Path, relations: Option<&Path>) -> Result<EntityCatalog, CliError> {
    let mut catalog = EntityCatalog::from_reader(open(descriptions)?)?;
    if let Some(path) = relations {
        catalog.load_relation_descriptions(open(path)?)?;
    }
    Ok(catalog)
}

pub fn read_corpus(path: &Path) -> Result<CorpusLines, CliError> {
    Ok(CorpusLines::from_reader(open(path)?)?)
}

/// Descriptions of the entities used by `kg`, in dense-id order.
pub fn entity_texts(kg: &KnowledgeGraph, catalog: &EntityCatalog) -> Vec<String> {
    kg.used_entities()
        .into_iter()
        .filter_map(|e| catalog.description(kg.entity_name(e)).map(str::to_string))
        .collect()
}

/// Descriptions of the relations used by `kg`, in dense-id order.
pub fn relation_texts(kg: &KnowledgeGraph, catalog: &EntityCatalog) -> Vec<String> {
    kg.used_relations()
        .into_iter()
        .filter_map(|r| catalog.relation_description(kg.relation_name(r)).map(str::to_string))
        .collect()
}
