//! Static object class inventory.

pub type ClassId = usize;

#[derive(Debug, Clone, Copy)]
pub struct ClassInfo {
    pub name: &'static str,
    pub pickupable: bool,
    /// `Some(n)` marks a receptacle able to hold `n` objects.
    pub receptacle_capacity: Option<usize>,
    pub openable: bool,
    pub toggleable: bool,
    pub sliceable: bool,
    /// Can be used as the cutting tool for Slice.
    pub slicer: bool,
    pub heatable: bool,
    /// Apparent (width, height) in world units, used by the renderer.
    pub size: (f64, f64),
}

const fn recep(name: &'static str, cap: usize, openable: bool, toggleable: bool, size: (f64, f64)) -> ClassInfo {
    ClassInfo {
        name,
        pickupable: false,
        receptacle_capacity: Some(cap),
        openable,
        toggleable,
        sliceable: false,
        slicer: false,
        heatable: false,
        size,
    }
}

const fn item(name: &'static str, sliceable: bool, slicer: bool, heatable: bool, size: (f64, f64)) -> ClassInfo {
    ClassInfo {
        name,
        pickupable: true,
        receptacle_capacity: None,
        openable: false,
        toggleable: false,
        sliceable,
        slicer,
        heatable,
        size,
    }
}

/// The 24-class inventory. Index order is the class id and is part of the
/// corpus format; append only.
pub const CLASSES: [ClassInfo; 24] = [
    recep("table", 4, false, false, (1.2, 0.8)),
    recep("countertop", 4, false, false, (1.4, 0.9)),
    recep("desk", 3, false, false, (1.1, 0.8)),
    recep("shelf", 3, false, false, (0.9, 1.2)),
    recep("sink", 2, false, false, (0.8, 0.5)),
    recep("cabinet", 2, true, false, (0.9, 1.0)),
    recep("fridge", 3, true, false, (0.9, 1.6)),
    ClassInfo {
        name: "microwave",
        pickupable: false,
        receptacle_capacity: Some(1),
        openable: true,
        toggleable: true,
        sliceable: false,
        slicer: false,
        heatable: false,
        size: (0.6, 0.4),
    },
    recep("drawer", 2, true, false, (0.8, 0.4)),
    recep("garbagecan", 2, false, false, (0.5, 0.6)),
    item("mug", false, false, true, (0.25, 0.25)),
    item("cup", false, false, true, (0.22, 0.28)),
    item("plate", false, false, true, (0.35, 0.08)),
    item("bowl", false, false, true, (0.3, 0.15)),
    item("apple", true, false, true, (0.2, 0.2)),
    item("bread", true, false, true, (0.35, 0.18)),
    item("tomato", true, false, true, (0.18, 0.18)),
    item("potato", true, false, true, (0.2, 0.15)),
    item("egg", false, false, true, (0.12, 0.15)),
    item("knife", false, true, false, (0.35, 0.06)),
    item("book", false, false, false, (0.3, 0.22)),
    item("candle", false, false, false, (0.1, 0.3)),
    item("spoon", false, false, false, (0.22, 0.05)),
    ClassInfo {
        name: "lamp",
        pickupable: false,
        receptacle_capacity: None,
        openable: false,
        toggleable: true,
        sliceable: false,
        slicer: false,
        heatable: false,
        size: (0.35, 1.1),
    },
];

pub const CLASS_COUNT: usize = CLASSES.len();

pub fn class_info(id: ClassId) -> &'static ClassInfo {
    &CLASSES[id]
}

pub fn class_name(id: ClassId) -> &'static str {
    CLASSES[id].name
}

pub fn class_by_name(name: &str) -> Option<ClassId> {
    CLASSES.iter().position(|c| c.name == name)
}

pub fn receptacle_ids() -> impl Iterator<Item = ClassId> {
    (0..CLASS_COUNT).filter(|&i| CLASSES[i].receptacle_capacity.is_some())
}

pub fn pickupable_ids() -> impl Iterator<Item = ClassId> {
    (0..CLASS_COUNT).filter(|&i| CLASSES[i].pickupable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_is_24_classes() {
        assert_eq!(CLASS_COUNT, 24);
        assert_eq!(receptacle_ids().count(), 10);
        assert_eq!(pickupable_ids().count(), 13);
    }

    #[test]
    fn names_are_unique_lowercase_single_tokens() {
        let mut seen = std::collections::HashSet::new();
        for c in &CLASSES {
            assert!(seen.insert(c.name));
            assert!(!c.name.contains(' '));
            assert_eq!(c.name, c.name.to_lowercase());
        }
    }
}
