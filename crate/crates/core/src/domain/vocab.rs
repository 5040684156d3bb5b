//! Closed vocabularies for profile attributes and trip fields.
//!
//! Every enum here serializes to the exact survey string via a single string
//! table, so CSV, JSON, and prompt rendering cannot drift apart. `ALL` gives
//! the canonical ordering used for histogram indices.

use serde::{Deserialize, Serialize};

/// A value outside one of the closed vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {field} value {value:?}; expected one of: {}", expected.join(", "))]
pub struct VocabError {
    pub field: &'static str,
    pub value: String,
    pub expected: &'static [&'static str],
}

macro_rules! vocab_enum {
    (
        $(#[$meta:meta])*
        $name:ident as $field:literal {
            $($variant:ident => $text:literal,)+
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant,)+
        }

        impl $name {
            /// All members in canonical order.
            pub const ALL: &'static [$name] = &[$($name::$variant,)+];

            /// Canonical survey string.
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text,)+
                }
            }

            /// Stable position in [`Self::ALL`], used as a histogram index.
            pub fn index(&self) -> usize {
                Self::ALL.iter().position(|v| v == self).expect("member of ALL")
            }
        }

        impl std::str::FromStr for $name {
            type Err = VocabError;

            fn from_str(s: &str) -> Result<Self, VocabError> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(VocabError {
                        field: $field,
                        value: s.to_owned(),
                        expected: &[$($text,)+],
                    }),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

vocab_enum! {
    /// Age bracket of a survey participant.
    AgeBand as "age" {
        Under18 => "<18",
        From18To25 => "18-25",
        From26To30 => "26-30",
        From31To35 => "31-35",
        From36To40 => "36-40",
        From41To45 => "41-45",
        From46To50 => "46-50",
        Over51 => ">51",
    }
}

vocab_enum! {
    /// Gender as recorded in the survey.
    Gender as "gender" {
        Male => "Male",
        Female => "Female",
    }
}

vocab_enum! {
    /// Occupation category.
    Occupation as "occupation" {
        GovernmentManagement => "Management of Government Agencies",
        EnterprisesPublicInstitutions => "Enterprises, and Public Institutions",
        ProfessionalTechnical => "Professional and Technical Personnel",
        CivilServants => "Civil Servants and Operational Staff in Firefighting, Postal, and Telecommunications Services",
        Students => "Students",
        CommercialService => "Commercial and Service Industry Personnel",
        SkilledWorkers => "Skilled Workers",
        SelfEmployed => "Self-employed Individuals",
        RetiredUnemployed => "Retired/Unemployed",
        Others => "Others",
    }
}

vocab_enum! {
    /// Self-reported income level.
    Income as "income" {
        Low => "Low",
        RelativelyLow => "Relatively Low",
        Medium => "Medium",
        RelativelyHigh => "Relatively High",
        High => "High",
    }
}

vocab_enum! {
    /// Highest education level attained.
    Education as "education" {
        Bachelors => "Bachelor's Degree",
        Associate => "Associate Degree",
        HighSchool => "High School Diploma",
        TechnicalSchool => "Technical School Diploma",
        Masters => "Master's Degree",
        JuniorHighSchool => "Junior High School Diploma",
        PrimarySchool => "Primary School Diploma",
    }
}

vocab_enum! {
    /// Living situation.
    Housing as "living_situation" {
        RentedHouse => "Rented House",
        OwnedHouse => "Owned House",
        Dormitory => "Dormitory",
        Others => "Others",
    }
}

vocab_enum! {
    /// Travel mode, shared between trip legs and the profile's primary mode.
    TravelMode as "travel_mode" {
        BusAndSubway => "Bus and Subway",
        Driving => "Driving",
        TaxiRideHailing => "Taxi/Ride-Hailing",
        ElectricBikeBicycle => "Electric Bike/Bicycle",
        Walking => "Walking",
        Other => "Other",
    }
}

vocab_enum! {
    /// Purpose of a trip leg.
    TravelPurpose as "travel_purpose" {
        CommutingToWork => "Commuting to Work",
        GoingToSchool => "Going to School",
        EntertainmentDining => "Entertainment/Dining",
        MedicalAppointment => "Medical Appointment",
        PickupDropoff => "Picking Up/Dropping Off Someone",
        ReturningHome => "Returning Home",
        Shopping => "Shopping",
        BusinessTrip => "Business Trip",
        VisitingFriends => "Visiting Friends",
        Other => "Other",
    }
}

/// Parses the survey's Yes/No car-ownership field.
pub fn parse_owns_car(s: &str) -> Result<bool, VocabError> {
    match s {
        "Yes" => Ok(true),
        "No" => Ok(false),
        _ => Err(VocabError {
            field: "own_a_car",
            value: s.to_owned(),
            expected: &["Yes", "No"],
        }),
    }
}

/// Canonical Yes/No string for car ownership.
pub fn owns_car_str(owns: bool) -> &'static str {
    if owns {
        "Yes"
    } else {
        "No"
    }
}
