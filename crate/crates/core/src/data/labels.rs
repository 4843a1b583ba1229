use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Gender,
    Age,
    Accent,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Gender, Attribute::Age, Attribute::Accent];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
            Attribute::Accent => "accent",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn num_classes(self) -> usize {
        match self {
            Attribute::Gender => Gender::ALL.len(),
            Attribute::Age => AgeGroup::ALL.len(),
            Attribute::Accent => AccentGroup::ALL.len(),
        }
    }

    pub fn class_name(self, class: usize) -> &'static str {
        match self {
            Attribute::Gender => Gender::ALL[class].name(),
            Attribute::Age => AgeGroup::ALL[class].name(),
            Attribute::Accent => AccentGroup::ALL[class].name(),
        }
    }

    pub fn parse_class(self, text: &str) -> Option<usize> {
        (0..self.num_classes()).find(|&c| self.class_name(c) == text)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const CLASS_COUNTS: [usize; 3] = [2, 3, 5];

macro_rules! label_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

label_enum!(Gender { Male => "Male", Female => "Female" });
label_enum!(AgeGroup { Young => "Young", Adult => "Adult", Senior => "Senior" });
label_enum!(AccentGroup {
    Usa => "USA",
    England => "England",
    Canada => "Canada",
    AustraliaNz => "AustraliaNZ",
    IndiaSeAsia => "IndiaSEAsia",
});

/// Normalized demographic labels of one speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Demographics {
    pub gender: Gender,
    pub age: AgeGroup,
    pub accent: AccentGroup,
}

impl Demographics {
    pub fn class_ids(&self) -> [usize; 3] {
        [self.gender.index(), self.age.index(), self.accent.index()]
    }

    pub fn from_class_ids(ids: [usize; 3]) -> Option<Self> {
        Some(Demographics {
            gender: Gender::from_index(ids[0])?,
            age: AgeGroup::from_index(ids[1])?,
            accent: AccentGroup::from_index(ids[2])?,
        })
    }

    pub fn class_name(&self, attr: Attribute) -> &'static str {
        match attr {
            Attribute::Gender => self.gender.name(),
            Attribute::Age => self.age.name(),
            Attribute::Accent => self.accent.name(),
        }
    }
}
