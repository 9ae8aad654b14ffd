//! COCO instance annotations and the category term table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use super::SynonymMap;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Instances {
    #[serde(default)]
    images: Vec<ImageEntry>,
    #[serde(default)]
    annotations: Vec<AnnEntry>,
    categories: Vec<Category>,
}

#[derive(Deserialize)]
struct ImageEntry {
    id: serde_json::Value,
}

#[derive(Deserialize)]
struct AnnEntry {
    image_id: serde_json::Value,
    category_id: u64,
}

#[derive(Deserialize)]
struct Category {
    id: u64,
    name: String,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Image id to the set of category names present. Only ids, category ids
/// and category names are read; listed images without instances map to an
/// empty set.
pub fn load_coco_instances(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let inst: Instances = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let names: BTreeMap<u64, String> = inst
        .categories
        .into_iter()
        .map(|c| (c.id, c.name.trim().to_lowercase()))
        .collect();
    let mut out: BTreeMap<String, BTreeSet<String>> =
        inst.images.iter().map(|i| (id_string(&i.id), BTreeSet::new())).collect();
    for a in inst.annotations {
        let name = names.get(&a.category_id).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: format!("unknown category id {}", a.category_id),
        })?;
        out.entry(id_string(&a.image_id)).or_default().insert(name.clone());
    }
    Ok(out)
}

/// Read a term table: a JSON object `{ "term": "category" }`.
pub fn load_synonyms(path: &Path) -> Result<SynonymMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: SynonymMap = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(map
        .into_iter()
        .map(|(k, v)| (k.trim().to_lowercase(), v.trim().to_lowercase()))
        .collect())
}

const COCO_CATEGORIES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard",
    "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase",
    "scissors", "teddy bear", "hair drier", "toothbrush",
];

const COCO_EXTRA: [(&str, &str); 48] = [
    ("man", "person"),
    ("men", "person"),
    ("woman", "person"),
    ("women", "person"),
    ("people", "person"),
    ("boy", "person"),
    ("girl", "person"),
    ("child", "person"),
    ("children", "person"),
    ("kid", "person"),
    ("kids", "person"),
    ("player", "person"),
    ("bike", "bicycle"),
    ("bikes", "bicycle"),
    ("motorbike", "motorcycle"),
    ("plane", "airplane"),
    ("jet", "airplane"),
    ("aircraft", "airplane"),
    ("ship", "boat"),
    ("puppy", "dog"),
    ("kitten", "cat"),
    ("pony", "horse"),
    ("lamb", "sheep"),
    ("cattle", "cow"),
    ("ball", "sports ball"),
    ("racket", "tennis racket"),
    ("glass", "wine glass"),
    ("mug", "cup"),
    ("doughnut", "donut"),
    ("sofa", "couch"),
    ("table", "dining table"),
    ("desk", "dining table"),
    ("television", "tv"),
    ("monitor", "tv"),
    ("computer", "laptop"),
    ("phone", "cell phone"),
    ("cellphone", "cell phone"),
    ("fridge", "refrigerator"),
    ("plant", "potted plant"),
    ("houseplant", "potted plant"),
    ("teddy", "teddy bear"),
    ("hair dryer", "hair drier"),
    ("bag", "handbag"),
    ("purse", "handbag"),
    ("luggage", "suitcase"),
    ("hydrant", "fire hydrant"),
    ("skier", "person"),
    ("surfer", "person"),
];

fn plural(term: &str) -> String {
    let (head, last) = match term.rsplit_once(' ') {
        Some((h, l)) => (format!("{h} "), l),
        None => (String::new(), term),
    };
    let p = if last.ends_with('s') || last.ends_with('x') || last.ends_with("ch") || last.ends_with("sh") {
        format!("{last}es")
    } else if last.ends_with('y') && !last.ends_with("ey") && !last.ends_with("ay") && !last.ends_with("oy") {
        format!("{}ies", &last[..last.len() - 1])
    } else if last == "knife" {
        "knives".into()
    } else {
        format!("{last}s")
    };
    format!("{head}{p}")
}

/// A basic COCO-80 term table: every category name, its plural, and a
/// list of common synonyms.
pub fn coco_synonyms() -> SynonymMap {
    let mut m = SynonymMap::new();
    for c in COCO_CATEGORIES {
        m.insert(c.to_string(), c.to_string());
        if !matches!(c, "skis" | "scissors") {
            m.entry(plural(c)).or_insert_with(|| c.to_string());
        }
    }
    for (t, c) in COCO_EXTRA {
        m.entry(t.to_string()).or_insert_with(|| c.to_string());
        if !t.ends_with('s') && !matches!(t, "men" | "women" | "people" | "children" | "cattle") {
            m.entry(plural(t)).or_insert_with(|| c.to_string());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coco_table_covers_categories() {
        let m = coco_synonyms();
        let cats: BTreeSet<&String> = m.values().collect();
        assert_eq!(cats.len(), 80);
        assert_eq!(m["knives"], "knife");
        assert_eq!(m["buses"], "bus");
        assert_eq!(m["dining tables"], "dining table");
        assert_eq!(m["women"], "person");
    }

    #[test]
    fn reads_instances() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inst.json");
        std::fs::write(
            &p,
            r#"{"images":[{"id":1},{"id":2},{"id":3}],
                "annotations":[{"image_id":1,"category_id":18},{"image_id":1,"category_id":18},{"image_id":2,"category_id":1}],
                "categories":[{"id":1,"name":"person"},{"id":18,"name":"Dog"}]}"#,
        )
        .unwrap();
        let m = load_coco_instances(&p).unwrap();
        assert_eq!(m["1"].iter().collect::<Vec<_>>(), ["dog"]);
        assert_eq!(m["2"].iter().collect::<Vec<_>>(), ["person"]);
        assert!(m["3"].is_empty());
    }
}
