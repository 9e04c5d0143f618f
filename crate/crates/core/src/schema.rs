//! The ordered class list used for every mask, table and rendering.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a class: its index in the schema.
pub type ClassId = u8;

/// Number of classes in the default road schema.
pub const ROAD_CLASS_COUNT: usize = 12;

pub const BACKGROUND: ClassId = 0;
pub const ASPHALT: ClassId = 1;
pub const PAVED: ClassId = 2;
pub const UNPAVED: ClassId = 3;
pub const MARKINGS: ClassId = 4;
pub const SPEED_BUMP: ClassId = 5;
pub const CATS_EYE: ClassId = 6;
pub const STORM_DRAIN: ClassId = 7;
pub const PATCH: ClassId = 8;
pub const WATER_PUDDLE: ClassId = 9;
pub const POTHOLE: ClassId = 10;
pub const CRACKS: ClassId = 11;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered set of class definitions. Ids are always `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct LabelSchema {
    classes: Vec<ClassDef>,
    /// Extra RGB colors accepted in color-coded masks, beyond each class's display color.
    color_aliases: Vec<([u8; 3], ClassId)>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    classes: Vec<ClassDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    color_map: Vec<ColorAlias>,
}

#[derive(Serialize, Deserialize)]
struct ColorAlias {
    color: [u8; 3],
    id: ClassId,
}

impl TryFrom<SchemaFile> for LabelSchema {
    type Error = Error;

    fn try_from(file: SchemaFile) -> Result<Self> {
        let mut schema = LabelSchema::new(file.classes)?;
        for alias in file.color_map {
            schema = schema.with_color_alias(alias.color, alias.id)?;
        }
        Ok(schema)
    }
}

impl From<LabelSchema> for SchemaFile {
    fn from(schema: LabelSchema) -> Self {
        SchemaFile {
            classes: schema.classes,
            color_map: schema
                .color_aliases
                .into_iter()
                .map(|(color, id)| ColorAlias { color, id })
                .collect(),
        }
    }
}

impl LabelSchema {
    pub fn new(classes: Vec<ClassDef>) -> Result<Self> {
        if classes.len() < 2 || classes.len() > 255 {
            return Err(Error::Config(format!(
                "a schema needs between 2 and 255 classes, got {}",
                classes.len()
            )));
        }
        for (index, class) in classes.iter().enumerate() {
            if class.id as usize != index {
                return Err(Error::Config(format!(
                    "class ids must be 0..{} in order; position {index} has id {}",
                    classes.len(),
                    class.id
                )));
            }
        }
        for (i, a) in classes.iter().enumerate() {
            if let Some(b) = classes[i + 1..].iter().find(|b| b.color == a.color) {
                return Err(Error::Config(format!(
                    "classes {} and {} share the color {:?}",
                    a.name, b.name, a.color
                )));
            }
        }
        Ok(LabelSchema {
            classes,
            color_aliases: Vec::new(),
        })
    }

    /// The twelve road classes, in the order used by every table and weight vector.
    pub fn road() -> Self {
        const CLASSES: [(&str, [u8; 3]); ROAD_CLASS_COUNT] = [
            ("Background", [0, 0, 0]),
            ("Asphalt", [85, 85, 255]),
            ("Paved", [255, 85, 0]),
            ("Unpaved", [170, 120, 50]),
            ("Markings", [255, 255, 255]),
            ("Speed-Bump", [255, 255, 0]),
            ("Cats-Eye", [0, 255, 255]),
            ("Storm-Drain", [128, 0, 128]),
            ("Patch", [0, 170, 0]),
            ("Water-Puddle", [0, 100, 255]),
            ("Pothole", [255, 0, 0]),
            ("Cracks", [255, 0, 255]),
        ];
        let classes = CLASSES
            .iter()
            .enumerate()
            .map(|(id, (name, color))| ClassDef {
                id: id as ClassId,
                name: (*name).to_string(),
                color: *color,
            })
            .collect();
        LabelSchema::new(classes).expect("built-in schema is valid")
    }

    pub fn with_color_alias(mut self, color: [u8; 3], id: ClassId) -> Result<Self> {
        if id as usize >= self.classes.len() {
            return Err(Error::Config(format!(
                "color alias targets unknown class {id}"
            )));
        }
        self.color_aliases.push((color, id));
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading schema {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.classes[id as usize].name
    }

    pub fn color(&self, id: ClassId) -> [u8; 3] {
        self.classes[id as usize].color
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (id as usize) < self.classes.len()
    }

    /// Looks a class up by name, ignoring case and treating `_`/space like `-`.
    pub fn id_by_name(&self, name: &str) -> Option<ClassId> {
        let canon = |s: &str| s.to_ascii_lowercase().replace(['_', ' '], "-");
        let wanted = canon(name);
        self.classes
            .iter()
            .find(|c| canon(&c.name) == wanted)
            .map(|c| c.id)
    }

    /// Color → class lookup covering display colors and configured aliases.
    pub fn color_table(&self) -> HashMap<[u8; 3], ClassId> {
        let mut table: HashMap<_, _> = self.classes.iter().map(|c| (c.color, c.id)).collect();
        table.extend(self.color_aliases.iter().copied());
        table
    }
}

impl Default for LabelSchema {
    fn default() -> Self {
        LabelSchema::road()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn road_schema_order() {
        let schema = LabelSchema::road();
        let names: Vec<_> = schema.classes().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "Background",
                "Asphalt",
                "Paved",
                "Unpaved",
                "Markings",
                "Speed-Bump",
                "Cats-Eye",
                "Storm-Drain",
                "Patch",
                "Water-Puddle",
                "Pothole",
                "Cracks"
            ]
        );
        for (i, c) in schema.classes().iter().enumerate() {
            assert_eq!(c.id as usize, i);
        }
        assert_eq!(schema.color_table().len(), ROAD_CLASS_COUNT);
    }

    #[test]
    fn rejects_gaps_and_duplicate_colors() {
        let def = |id, color| ClassDef {
            id,
            name: format!("c{id}"),
            color,
        };
        assert!(LabelSchema::new(vec![def(0, [0, 0, 0]), def(2, [1, 1, 1])]).is_err());
        assert!(LabelSchema::new(vec![def(0, [0, 0, 0]), def(1, [0, 0, 0])]).is_err());
        assert!(LabelSchema::new(vec![def(0, [0, 0, 0]), def(1, [1, 0, 0])]).is_ok());
    }

    #[test]
    fn json_round_trip_with_aliases() {
        let schema = LabelSchema::road()
            .with_color_alias([1, 2, 3], POTHOLE)
            .unwrap();
        let text = serde_json::to_string(&schema).unwrap();
        let back: LabelSchema = serde_json::from_str(&text).unwrap();
        assert_eq!(back, schema);
        assert_eq!(back.color_table()[&[1, 2, 3]], POTHOLE);
    }

    #[test]
    fn name_lookup() {
        let schema = LabelSchema::road();
        assert_eq!(schema.id_by_name("water_puddle"), Some(WATER_PUDDLE));
        assert_eq!(schema.id_by_name("Speed Bump"), Some(SPEED_BUMP));
        assert_eq!(schema.id_by_name("nope"), None);
    }
}
