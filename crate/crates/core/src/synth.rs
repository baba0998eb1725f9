//! Deterministic generator of toy schemas and dialogues in the SGD format.
//!
//! Services are built from domain archetypes whose slots draw on shared slot
//! concepts (closed value lexicons plus phrasing templates). Unseen services
//! are copies of seen archetypes under different service, slot and intent
//! names and held-out description paraphrases, so that transfer to them is
//! possible from the schema text and the utterance phrasing alone.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::stable_hash;
use crate::error::{Error, Result};
use crate::schema::{
    write_json, Dialogue, DialogueState, Frame, IntentSchema, ServiceSchema, SlotSchema, SpanAnnotation, Speaker, Turn,
    DONTCARE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Services seen in training.
    pub num_services: usize,
    /// Paraphrased copies held out of training.
    pub unseen_services: usize,
    pub slots_per_service: usize,
    pub categorical_fraction: f64,
    pub values_per_categorical: usize,
    pub intents_per_service: usize,
    pub dialogues_per_service: usize,
    /// User turns per dialogue.
    pub turns_per_dialogue: usize,
    pub domain_switch_fraction: f64,
    /// Replaces the built-in slot description paraphrases, keyed by slot
    /// concept. The first entry describes seen services, the last unseen.
    pub description_paraphrase_pool: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_services: 3,
            unseen_services: 1,
            slots_per_service: 5,
            categorical_fraction: 0.4,
            values_per_categorical: 3,
            intents_per_service: 2,
            dialogues_per_service: 60,
            turns_per_dialogue: 4,
            domain_switch_fraction: 0.1,
            description_paraphrase_pool: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_services", self.num_services),
            ("slots_per_service", self.slots_per_service),
            ("values_per_categorical", self.values_per_categorical),
            ("intents_per_service", self.intents_per_service),
            ("dialogues_per_service", self.dialogues_per_service),
            ("turns_per_dialogue", self.turns_per_dialogue),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("categorical_fraction", self.categorical_fraction),
            ("domain_switch_fraction", self.domain_switch_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth.{name} = {v} is outside [0, 1]")));
            }
        }
        if self.num_services > ARCHETYPES.len() {
            return Err(Error::Config(format!("synth.num_services is limited to {} archetypes", ARCHETYPES.len())));
        }
        for (k, pool) in &self.description_paraphrase_pool {
            if concept(k).is_none() {
                return Err(Error::Config(format!("unknown slot concept `{k}` in paraphrase pool")));
            }
            if pool.is_empty() {
                return Err(Error::Config(format!("paraphrase pool for `{k}` is empty")));
            }
        }
        Ok(())
    }
}

struct SlotConcept {
    key: &'static str,
    /// Seen name, unseen name.
    names: [&'static str; 2],
    descriptions: &'static [&'static str],
    noun: &'static str,
    values: &'static [&'static str],
    /// Phrases with one `{v}` placeholder.
    inform: &'static [&'static str],
    ask: &'static str,
    prefer_categorical: bool,
}

struct IntentConcept {
    names: [&'static str; 2],
    descriptions: [&'static str; 2],
    phrases: &'static [&'static str],
}

struct Archetype {
    domain: &'static str,
    descriptions: [&'static str; 2],
    slots: &'static [&'static str],
    intents: &'static [IntentConcept],
}

const CITIES: &[&str] = &[
    "san francisco",
    "new york",
    "los angeles",
    "seattle",
    "chicago",
    "boston",
    "denver",
    "austin",
    "portland",
    "miami",
    "atlanta",
    "phoenix",
    "dallas",
    "san diego",
    "sacramento",
    "oakland",
    "san jose",
    "vancouver",
];
const DATES: &[&str] = &[
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "today",
    "tomorrow",
    "march 3rd",
    "next friday",
    "the 12th",
];
const TIMES: &[&str] = &["6 pm", "6:30 pm", "7 pm", "7:30 pm", "8 pm", "noon", "11 am", "9:15 am", "5:45 pm", "10 am"];
const SMALL_COUNTS: &[&str] = &["2", "4", "3", "1", "5", "6"];
const STREETS: &[&str] = &[
    "123 main street",
    "45 market street",
    "800 pine avenue",
    "17 oak lane",
    "250 elm street",
    "9 harbor drive",
    "640 lake road",
    "72 mission street",
];

const CONCEPTS: &[SlotConcept] = &[
    SlotConcept {
        key: "city",
        names: ["city", "restaurant_location"],
        descriptions: &["city where the restaurant is located", "the city in which the restaurant is found"],
        noun: "city",
        values: CITIES,
        inform: &["in {v}", "somewhere in {v}", "near {v}"],
        ask: "which city should i search in ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "cuisine",
        names: ["cuisine", "food_type"],
        descriptions: &["type of food served at the restaurant", "kind of food the restaurant serves"],
        noun: "cuisine",
        values: &["italian", "mexican", "chinese", "indian", "thai", "japanese", "french", "greek", "korean"],
        inform: &["{v} food", "some {v} cuisine", "serving {v} food"],
        ask: "what kind of food would you like ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "party_size",
        names: ["party_size", "number_of_diners"],
        descriptions: &["number of people in the reservation", "how many people the table is for"],
        noun: "party size",
        values: SMALL_COUNTS,
        inform: &["for {v} people", "a table for {v}", "{v} guests"],
        ask: "how many people will be dining ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "date",
        names: ["date", "reservation_day"],
        descriptions: &["date of the restaurant reservation", "the day the table is reserved for"],
        noun: "date",
        values: DATES,
        inform: &["on {v}", "for {v}"],
        ask: "what day would you like ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "time",
        names: ["time", "reservation_time"],
        descriptions: &["time of the restaurant reservation", "the time the table is reserved for"],
        noun: "time",
        values: TIMES,
        inform: &["at {v}", "around {v}"],
        ask: "what time works for you ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "price_range",
        names: ["price_range", "cost_level"],
        descriptions: &["price range of the restaurant", "how expensive the restaurant is"],
        noun: "price range",
        values: &["cheap", "moderate", "expensive", "very expensive"],
        inform: &["something {v}", "with {v} prices", "a {v} place"],
        ask: "what price range do you prefer ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "restaurant_name",
        names: ["restaurant_name", "eatery"],
        descriptions: &["name of the restaurant", "what the restaurant is called"],
        noun: "restaurant name",
        values: &[
            "la taqueria",
            "blue plate",
            "sushi ran",
            "the slanted door",
            "zuni cafe",
            "nopa",
            "state bird",
            "pizzeria delfina",
            "tartine",
        ],
        inform: &["a table at {v}", "the place called {v}"],
        ask: "which restaurant do you have in mind ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "origin",
        names: ["origin_city", "departure_airport_city"],
        descriptions: &["city the flight departs from", "the city where the flight leaves from"],
        noun: "departure city",
        values: CITIES,
        inform: &["from {v}", "departing from {v}"],
        ask: "where are you flying from ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "destination",
        names: ["destination_city", "arrival_airport_city"],
        descriptions: &["city the flight arrives in", "the city where the flight lands"],
        noun: "destination",
        values: CITIES,
        inform: &["to {v}", "going to {v}", "flying into {v}"],
        ask: "where are you flying to ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "seating_class",
        names: ["seating_class", "cabin"],
        descriptions: &["cabin class of the flight seat", "which class the seat is in on the flight"],
        noun: "seating class",
        values: &["economy", "premium economy", "business", "first class"],
        inform: &["a {v} seat", "in the {v} cabin"],
        ask: "which seating class would you like ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "departure_date",
        names: ["departure_date", "flight_day"],
        descriptions: &["date the flight departs", "the day of the flight"],
        noun: "departure date",
        values: DATES,
        inform: &["on {v}", "departing {v}"],
        ask: "what day do you want to fly ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "passengers",
        names: ["passengers", "traveler_count"],
        descriptions: &["number of passengers on the flight", "how many people are flying"],
        noun: "number of passengers",
        values: SMALL_COUNTS,
        inform: &["for {v} passengers", "{v} tickets"],
        ask: "how many passengers ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "airline",
        names: ["airline", "carrier"],
        descriptions: &["airline operating the flight", "the company that operates the flight"],
        noun: "airline",
        values: &["united", "delta", "american airlines", "alaska airlines", "southwest", "jetblue"],
        inform: &["with {v}", "flying {v}"],
        ask: "any preferred airline ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "hotel_city",
        names: ["location", "hotel_town"],
        descriptions: &["city where the hotel is located", "the city the hotel is in"],
        noun: "location",
        values: CITIES,
        inform: &["in {v}", "staying in {v}"],
        ask: "which city are you staying in ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "stars",
        names: ["star_rating", "hotel_class"],
        descriptions: &["star rating of the hotel", "how many stars the hotel has"],
        noun: "star rating",
        values: &["3", "4", "5", "2", "1"],
        inform: &["with {v} stars", "a {v} star hotel"],
        ask: "how many stars should the hotel have ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "check_in",
        names: ["check_in_date", "arrival_day"],
        descriptions: &["date of check in at the hotel", "the day the hotel stay starts"],
        noun: "check in date",
        values: DATES,
        inform: &["checking in {v}", "arriving {v}"],
        ask: "when do you check in ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "rooms",
        names: ["number_of_rooms", "room_count"],
        descriptions: &["number of rooms to reserve", "how many hotel rooms are needed"],
        noun: "number of rooms",
        values: &["1", "2", "3"],
        inform: &["{v} rooms", "for {v} rooms"],
        ask: "how many rooms do you need ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "hotel_name",
        names: ["hotel_name", "lodging"],
        descriptions: &["name of the hotel", "what the hotel is called"],
        noun: "hotel name",
        values: &[
            "hilton garden inn",
            "marriott",
            "hyatt regency",
            "the ritz",
            "motel 6",
            "best western",
            "holiday inn",
            "four seasons",
        ],
        inform: &["a room at {v}", "the hotel called {v}"],
        ask: "which hotel do you have in mind ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "pickup",
        names: ["pickup_location", "start_address"],
        descriptions: &["address where the ride picks you up", "the street address the ride starts at"],
        noun: "pickup location",
        values: STREETS,
        inform: &["pick me up at {v}", "starting at {v}"],
        ask: "where should the driver pick you up ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "dropoff",
        names: ["dropoff_location", "end_address"],
        descriptions: &["address where the ride drops you off", "the street address the ride ends at"],
        noun: "drop off location",
        values: STREETS,
        inform: &["drop me at {v}", "going to {v}"],
        ask: "where are you headed ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "ride_type",
        names: ["ride_type", "car_category"],
        descriptions: &["type of ride to book", "which kind of car the ride uses"],
        noun: "ride type",
        values: &["pool", "regular", "luxury"],
        inform: &["a {v} ride", "the {v} option"],
        ask: "which ride type do you want ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "riders",
        names: ["number_of_riders", "rider_count"],
        descriptions: &["number of people riding", "how many people are in the ride"],
        noun: "number of riders",
        values: SMALL_COUNTS,
        inform: &["for {v} riders", "{v} seats"],
        ask: "how many riders ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "theater_city",
        names: ["theater_city", "cinema_location"],
        descriptions: &["city where the movie theater is", "the city the cinema is in"],
        noun: "city",
        values: CITIES,
        inform: &["in {v}", "playing in {v}"],
        ask: "which city are you in ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "genre",
        names: ["genre", "film_category"],
        descriptions: &["genre of the movie", "what kind of film it is"],
        noun: "genre",
        values: &["comedy", "drama", "action", "horror", "animation", "thriller"],
        inform: &["a {v} movie", "some {v}"],
        ask: "what genre are you in the mood for ?",
        prefer_categorical: true,
    },
    SlotConcept {
        key: "show_date",
        names: ["show_date", "screening_day"],
        descriptions: &["date of the movie showing", "the day of the screening"],
        noun: "date",
        values: DATES,
        inform: &["on {v}", "for {v}"],
        ask: "which day ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "show_time",
        names: ["show_time", "screening_time"],
        descriptions: &["time of the movie showing", "the time of the screening"],
        noun: "show time",
        values: TIMES,
        inform: &["at {v}", "around {v}"],
        ask: "what time ?",
        prefer_categorical: false,
    },
    SlotConcept {
        key: "movie_title",
        names: ["movie_name", "film_title"],
        descriptions: &["title of the movie", "the name of the film"],
        noun: "movie",
        values: &["the matrix", "toy story", "inception", "jaws", "frozen", "alien", "the godfather"],
        inform: &["watch {v}", "see {v}"],
        ask: "which movie would you like to see ?",
        prefer_categorical: false,
    },
];

const ARCHETYPES: &[Archetype] = &[
    Archetype {
        domain: "Restaurants",
        descriptions: ["find and reserve restaurants", "search for places to eat and book tables"],
        slots: &["city", "cuisine", "date", "party_size", "time", "price_range", "restaurant_name"],
        intents: &[
            IntentConcept {
                names: ["FindRestaurants", "SearchDining"],
                descriptions: ["find a restaurant to eat at", "search for a place to eat"],
                phrases: &["find a restaurant", "look for a place to eat"],
            },
            IntentConcept {
                names: ["ReserveRestaurant", "BookTable"],
                descriptions: ["reserve a table at a restaurant", "book a table for a meal"],
                phrases: &["book a table", "make a reservation"],
            },
        ],
    },
    Archetype {
        domain: "Flights",
        descriptions: ["search and book flights", "find plane tickets and buy them"],
        slots: &["origin", "seating_class", "destination", "passengers", "departure_date", "airline"],
        intents: &[
            IntentConcept {
                names: ["SearchOnewayFlight", "FindFlights"],
                descriptions: ["search for a one way flight", "look for flights in one direction"],
                phrases: &["find a flight", "search for flights"],
            },
            IntentConcept {
                names: ["ReserveOnewayFlight", "BookFlight"],
                descriptions: ["reserve a one way flight", "buy a ticket for a flight"],
                phrases: &["book a flight", "buy plane tickets"],
            },
        ],
    },
    Archetype {
        domain: "Hotels",
        descriptions: ["find and book hotels", "search for places to stay and reserve rooms"],
        slots: &["hotel_city", "stars", "check_in", "rooms", "hotel_name"],
        intents: &[
            IntentConcept {
                names: ["SearchHotel", "FindLodging"],
                descriptions: ["search for a hotel", "look for a place to stay"],
                phrases: &["find a hotel", "look for a place to stay"],
            },
            IntentConcept {
                names: ["ReserveHotel", "BookRoom"],
                descriptions: ["reserve rooms at a hotel", "book a hotel room"],
                phrases: &["book a room", "reserve a hotel"],
            },
        ],
    },
    Archetype {
        domain: "RideSharing",
        descriptions: ["order rides to a destination", "book a car to take you somewhere"],
        slots: &["pickup", "ride_type", "dropoff", "riders"],
        intents: &[
            IntentConcept {
                names: ["GetRide", "OrderTaxi"],
                descriptions: ["book a ride to a destination", "order a car to take you somewhere"],
                phrases: &["get a ride", "order a cab"],
            },
            IntentConcept {
                names: ["GetFare", "CheckRidePrice"],
                descriptions: ["check the price of a ride", "find out what a ride costs"],
                phrases: &["check the fare", "see what a ride costs"],
            },
        ],
    },
    Archetype {
        domain: "Movies",
        descriptions: ["find movies and buy tickets", "look for films and purchase seats"],
        slots: &["theater_city", "genre", "show_date", "show_time", "movie_title"],
        intents: &[
            IntentConcept {
                names: ["FindMovies", "SearchFilms"],
                descriptions: ["find movies playing nearby", "look for films showing nearby"],
                phrases: &["find a movie", "look for films"],
            },
            IntentConcept {
                names: ["BuyMovieTickets", "PurchaseTickets"],
                descriptions: ["buy tickets for a movie", "purchase seats for a film"],
                phrases: &["buy movie tickets", "get tickets for a film"],
            },
        ],
    },
];

fn concept(key: &str) -> Option<&'static SlotConcept> {
    CONCEPTS.iter().find(|c| c.key == key)
}

fn concept_of_slot(name: &str) -> Option<&'static SlotConcept> {
    CONCEPTS.iter().find(|c| c.names.contains(&name))
}

fn intent_concept(name: &str) -> Option<&'static IntentConcept> {
    ARCHETYPES.iter().flat_map(|a| a.intents.iter()).find(|i| i.names.contains(&name))
}

/// Schemas of one generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSchemas {
    pub seen: Vec<ServiceSchema>,
    pub unseen: Vec<ServiceSchema>,
    /// Degenerate-input notices, also logged.
    pub warnings: Vec<String>,
}

impl SynthSchemas {
    pub fn all(&self) -> Vec<ServiceSchema> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }
}

fn build_service(
    cfg: &SynthConfig,
    arch: &Archetype,
    name: String,
    variant: usize,
    warnings: &mut Vec<String>,
) -> ServiceSchema {
    let pick = |pool: &[String]| if variant == 0 { pool[0].clone() } else { pool[pool.len() - 1].clone() };
    let n = cfg.slots_per_service.min(arch.slots.len());
    if n < cfg.slots_per_service {
        warnings.push(format!("{} offers only {} slots; generating {n}", arch.domain, arch.slots.len()));
    }
    let concepts: Vec<&SlotConcept> = arch.slots[..n].iter().map(|k| concept(k).expect("known concept")).collect();
    // categorical slots: preferred concepts first, then in archetype order
    let num_cat = (cfg.categorical_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (!concepts[i].prefer_categorical, i));
    let categorical: BTreeSet<usize> = order[..num_cat].iter().copied().collect();

    let slots = concepts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let pool: Vec<String> = match cfg.description_paraphrase_pool.get(c.key) {
                Some(p) => p.clone(),
                None => c.descriptions.iter().map(|s| s.to_string()).collect(),
            };
            if pool.len() == 1 && variant == 1 {
                warnings.push(format!(
                    "paraphrase pool for `{}` has one description; seen and unseen descriptions are identical",
                    c.key
                ));
            }
            let is_categorical = categorical.contains(&i);
            SlotSchema {
                name: c.names[variant].to_string(),
                description: pick(&pool),
                is_categorical,
                possible_values: if is_categorical {
                    c.values.iter().take(cfg.values_per_categorical).map(|v| v.to_string()).collect()
                } else {
                    Vec::new()
                },
            }
        })
        .collect::<Vec<_>>();
    let k = cfg.intents_per_service.min(arch.intents.len());
    let intents = arch.intents[..k]
        .iter()
        .map(|ic| IntentSchema {
            name: ic.names[variant].to_string(),
            description: ic.descriptions[variant].to_string(),
            required_slots: slots.iter().take(2).map(|s| s.name.clone()).collect(),
            optional_slots: slots.iter().skip(2).map(|s| s.name.clone()).collect(),
        })
        .collect();
    ServiceSchema { service_name: name, description: arch.descriptions[variant].to_string(), slots, intents }
}

/// Seen services `Domain_1` and, for unseen service `k`, a paraphrased
/// copy of seen archetype `k mod num_services` named `Domain_2`, `Domain_3`...
pub fn synth_schemas(cfg: &SynthConfig) -> Result<SynthSchemas> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let seen: Vec<ServiceSchema> = ARCHETYPES[..cfg.num_services]
        .iter()
        .map(|a| build_service(cfg, a, format!("{}_1", a.domain), 0, &mut warnings))
        .collect();
    let mut copies: BTreeMap<&str, usize> = BTreeMap::new();
    let unseen = (0..cfg.unseen_services)
        .map(|k| {
            let arch = &ARCHETYPES[k % cfg.num_services];
            let c = copies.entry(arch.domain).or_insert(1);
            *c += 1;
            build_service(cfg, arch, format!("{}_{}", arch.domain, c), 1, &mut warnings)
        })
        .collect();
    warnings.dedup();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SynthSchemas { seen, unseen, warnings })
}

/// An utterance under construction, tracking character offsets of values.
#[derive(Default)]
struct Utterance {
    text: String,
    len: usize,
    spans: Vec<SpanAnnotation>,
}

impl Utterance {
    fn push(&mut self, s: &str) {
        if !self.text.is_empty() && !s.is_empty() {
            self.text.push(' ');
            self.len += 1;
        }
        self.text.push_str(s);
        self.len += s.chars().count();
    }

    /// Appends a template with `{v}` replaced by `value`; records a span
    /// for `slot` when given.
    fn push_template(&mut self, template: &str, value: &str, slot: Option<&str>) {
        let (before, after) = template.split_once("{v}").unwrap_or((template, ""));
        self.push(before.trim_end());
        if !self.text.is_empty() {
            self.text.push(' ');
            self.len += 1;
        }
        let start = self.len;
        self.text.push_str(value);
        self.len += value.chars().count();
        if let Some(slot) = slot {
            self.spans.push(SpanAnnotation { slot: slot.to_string(), start, exclusive_end: self.len });
        }
        let after = after.trim_start();
        if !after.is_empty() {
            self.push(after);
        }
    }
}

/// A service as the generator sees it: schema plus slot concepts.
struct ServiceView<'a> {
    schema: &'a ServiceSchema,
    concepts: Vec<&'static SlotConcept>,
    intents: Vec<&'static IntentConcept>,
}

impl<'a> ServiceView<'a> {
    fn new(schema: &'a ServiceSchema) -> Result<Self> {
        let concepts = schema
            .slots
            .iter()
            .map(|s| {
                concept_of_slot(&s.name).ok_or_else(|| Error::Schema {
                    service: schema.service_name.clone(),
                    message: format!("slot `{}` was not produced by the generator", s.name),
                })
            })
            .collect::<Result<_>>()?;
        let intents = schema
            .intents
            .iter()
            .map(|i| {
                intent_concept(&i.name).ok_or_else(|| Error::Schema {
                    service: schema.service_name.clone(),
                    message: format!("intent `{}` was not produced by the generator", i.name),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ServiceView { schema, concepts, intents })
    }

    fn value_pool(&self, slot: usize) -> Vec<&str> {
        let s = &self.schema.slots[slot];
        if s.is_categorical {
            s.possible_values.iter().map(String::as_str).collect()
        } else {
            self.concepts[slot].values.to_vec()
        }
    }
}

enum SystemAct {
    Greeting,
    Ask(usize),
    Offer(usize, String),
    Open,
}

/// Generation state for one service segment of a dialogue.
struct Segment<'a, 'b> {
    view: &'b ServiceView<'a>,
    goal: BTreeMap<usize, String>,
    state: DialogueState,
    intent: usize,
}

impl<'a, 'b> Segment<'a, 'b> {
    fn new(view: &'b ServiceView<'a>, rng: &mut ChaCha8Rng) -> Self {
        let mut goal = BTreeMap::new();
        for i in 0..view.schema.slots.len() {
            if rng.gen_bool(0.8) {
                let v = if rng.gen_bool(0.1) {
                    DONTCARE.to_string()
                } else {
                    view.value_pool(i).choose(rng).expect("non-empty pool").to_string()
                };
                goal.insert(i, v);
            }
        }
        Segment { view, goal, state: DialogueState::default(), intent: rng.gen_range(0..view.intents.len().max(1)) }
    }

    fn slot_name(&self, i: usize) -> &str {
        &self.view.schema.slots[i].name
    }

    fn pending(&self) -> Vec<usize> {
        self.goal
            .iter()
            .filter(|(i, v)| self.state.slot_values.get(self.slot_name(**i)) != Some(std::slice::from_ref(*v)))
            .map(|(i, _)| *i)
            .collect()
    }

    fn set(&mut self, i: usize, v: &str) {
        let name = self.slot_name(i).to_string();
        self.state.slot_values.insert(name, vec![v.to_string()]);
    }

    fn span_slot(&self, i: usize) -> Option<String> {
        (!self.view.schema.slots[i].is_categorical).then(|| self.slot_name(i).to_string())
    }

    /// User informs the goal value of slot `i`.
    fn inform(&mut self, u: &mut Utterance, i: usize, rng: &mut ChaCha8Rng) {
        let c = self.view.concepts[i];
        let v = self.goal[&i].clone();
        if v == DONTCARE {
            let t = ["any {v} is fine", "i do not care about the {v}"].choose(rng).expect("non-empty");
            u.push(&t.replace("{v}", c.noun));
        } else {
            let t = c.inform.choose(rng).expect("non-empty");
            let slot = self.span_slot(i);
            u.push_template(t, &v, slot.as_deref());
        }
        self.set(i, &v);
    }

    fn system_turn(&self, rng: &mut ChaCha8Rng, first_of_segment: bool) -> (SystemAct, Utterance) {
        let mut u = Utterance::default();
        if first_of_segment {
            u.push("is there anything else i can help with ?");
            return (SystemAct::Greeting, u);
        }
        // the system keeps restating the task so the active intent stays
        // visible within the current exchange
        let phrase = self.intent_phrase(self.intent, rng);
        u.push(&format!("to {phrase} ,"));
        let mut pending = self.pending();
        if pending.is_empty() {
            u.push(["anything else ?", "is there anything else i can do ?"].choose(rng).expect("non-empty"));
            return (SystemAct::Open, u);
        }
        pending.shuffle(rng);
        let i = pending[0];
        let goal = &self.goal[&i];
        if goal != DONTCARE && rng.gen_bool(0.3) {
            let pool = self.view.value_pool(i);
            let v = if rng.gen_bool(0.6) || pool.len() < 2 {
                goal.clone()
            } else {
                pool.iter()
                    .filter(|p| *p != goal)
                    .copied()
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .expect("non-empty")
                    .to_string()
            };
            let t = ["how about {v} ?", "would {v} work for you ?"].choose(rng).expect("non-empty");
            // only offers the user accepts are annotated: spans mark gold values
            let slot = if &v == goal { self.span_slot(i) } else { None };
            u.push_template(t, &v, slot.as_deref());
            return (SystemAct::Offer(i, v), u);
        }
        u.push(self.view.concepts[i].ask);
        (SystemAct::Ask(i), u)
    }

    fn user_turn(&mut self, act: &SystemAct, rng: &mut ChaCha8Rng, opening: Option<&str>) -> Utterance {
        let mut u = Utterance::default();
        self.state.requested_slots.clear();
        let mut informed = BTreeSet::new();
        if let Some(prefix) = opening {
            let phrase = self.intent_phrase(self.intent, rng);
            u.push(&format!("{prefix} {phrase}"));
            self.state.active_intent = self.intent_name(self.intent);
            for i in self.pending().into_iter().take(rng.gen_range(0..=2)) {
                self.inform(&mut u, i, rng);
                informed.insert(i);
            }
        } else {
            match act {
                SystemAct::Ask(i) => {
                    self.inform(&mut u, *i, rng);
                    informed.insert(*i);
                    if rng.gen_bool(0.3) {
                        if let Some(&j) = self.pending().first() {
                            u.push("and");
                            self.inform(&mut u, j, rng);
                            informed.insert(j);
                        }
                    }
                }
                SystemAct::Offer(i, v) => {
                    if Some(v) == self.goal.get(i) {
                        u.push(["yes , that works", "sure , sounds good"].choose(rng).expect("non-empty"));
                        self.set(*i, v);
                    } else {
                        u.push("no ,");
                        self.inform(&mut u, *i, rng);
                    }
                    informed.insert(*i);
                }
                SystemAct::Greeting | SystemAct::Open => {
                    if let Some(&j) = self.pending().first() {
                        self.inform(&mut u, j, rng);
                        informed.insert(j);
                    } else if rng.gen_bool(0.5) && self.view.intents.len() > 1 {
                        self.intent = (self.intent + 1) % self.view.intents.len();
                        let phrase = self.intent_phrase(self.intent, rng);
                        u.push(&format!("now i want to {phrase}"));
                        self.state.active_intent = self.intent_name(self.intent);
                    } else {
                        u.push("no , thank you");
                    }
                }
            }
        }
        if rng.gen_bool(0.2) {
            let candidates: Vec<usize> = (0..self.view.schema.slots.len()).filter(|i| !informed.contains(i)).collect();
            if let Some(&r) = candidates.choose(rng) {
                u.push(&format!("what is the {} ?", self.view.concepts[r].noun));
                let name = self.slot_name(r).to_string();
                self.state.requested_slots.insert(name);
            }
        }
        u
    }

    fn intent_name(&self, i: usize) -> String {
        self.view.schema.intents.get(i).map_or_else(|| "NONE".to_string(), |x| x.name.clone())
    }

    fn intent_phrase(&self, i: usize, rng: &mut ChaCha8Rng) -> String {
        self.view.intents.get(i).map_or("get some help", |c| c.phrases.choose(rng).expect("non-empty")).to_string()
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn generate_dialogue(id: String, views: &[ServiceView<'_>], primary: usize, cfg: &SynthConfig, seed: u64) -> Dialogue {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, stable_hash(&id)));
    let switch = views.len() > 1 && rng.gen_bool(cfg.domain_switch_fraction) && cfg.turns_per_dialogue > 1;
    let mut order = vec![primary];
    if switch {
        let others: Vec<usize> = (0..views.len()).filter(|&i| i != primary).collect();
        order.push(*others.choose(&mut rng).expect("at least one other service"));
    }
    let first_len = if switch { cfg.turns_per_dialogue.div_ceil(2) } else { cfg.turns_per_dialogue };
    let mut turns: Vec<Turn> = Vec::new();
    for (seg_index, &v) in order.iter().enumerate() {
        let view = &views[v];
        let service = view.schema.service_name.clone();
        let mut seg = Segment::new(view, &mut rng);
        let n = if seg_index == 0 { first_len } else { cfg.turns_per_dialogue - first_len };
        for k in 0..n {
            let mut act = SystemAct::Greeting;
            if !turns.is_empty() {
                let (a, u) = seg.system_turn(&mut rng, k == 0);
                act = a;
                turns.push(Turn {
                    speaker: Speaker::System,
                    utterance: u.text,
                    frames: vec![Frame { service: service.clone(), spans: u.spans, state: None }],
                });
            }
            let opening = (k == 0).then_some(if seg_index == 0 { "i want to" } else { "also , i need to" });
            let u = seg.user_turn(&act, &mut rng, opening);
            turns.push(Turn {
                speaker: Speaker::User,
                utterance: u.text,
                frames: vec![Frame { service: service.clone(), spans: u.spans, state: Some(seg.state.clone()) }],
            });
        }
    }
    Dialogue { dialogue_id: id, services: order.iter().map(|&i| views[i].schema.service_name.clone()).collect(), turns }
}

/// `dialogues_per_service` dialogues starting in each of `schemas`; a
/// `domain_switch_fraction` of them move to another of `schemas` halfway.
pub fn synth_dialogues(schemas: &[ServiceSchema], cfg: &SynthConfig, prefix: &str, seed: u64) -> Result<Vec<Dialogue>> {
    cfg.validate()?;
    let views: Vec<ServiceView<'_>> = schemas.iter().map(ServiceView::new).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> =
        (0..views.len()).flat_map(|s| (0..cfg.dialogues_per_service).map(move |i| (s, i))).collect();
    Ok(jobs
        .par_iter()
        .map(|&(s, i)| {
            let id = format!("{prefix}_{}_{i:05}", views[s].schema.service_name);
            generate_dialogue(id, &views, s, cfg, seed)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub schemas: Vec<ServiceSchema>,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Seen services only.
    pub train: SynthSplit,
    /// Seen and unseen services, generated with a different seed.
    pub dev: SynthSplit,
    pub unseen_services: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_services: Vec<String>,
    pub dev_services: Vec<String>,
    pub unseen_services: Vec<String>,
    pub config: SynthConfig,
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    let schemas = synth_schemas(cfg)?;
    let train = synth_dialogues(&schemas.seen, cfg, "train", cfg.seed)?;
    let all = schemas.all();
    let dev = synth_dialogues(&all, cfg, "dev", mix(cfg.seed, 0x0064_6576))?;
    Ok(SynthDataset {
        train: SynthSplit { schemas: schemas.seen.clone(), dialogues: train },
        dev: SynthSplit { schemas: all, dialogues: dev },
        unseen_services: schemas.unseen.iter().map(|s| s.service_name.clone()).collect(),
        warnings: schemas.warnings,
    })
}

impl SynthDataset {
    /// Writes `train/` and `dev/` split directories (`schema.json`,
    /// `dialogues_001.json`) and `splits.json`.
    pub fn write(&self, dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
        let dir = dir.as_ref();
        for (name, split) in [("train", &self.train), ("dev", &self.dev)] {
            let d = dir.join(name);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            write_json(d.join("schema.json"), &split.schemas)?;
            write_json(d.join("dialogues_001.json"), &split.dialogues)?;
        }
        let names = |s: &[ServiceSchema]| s.iter().map(|x| x.service_name.clone()).collect();
        write_json(
            dir.join("splits.json"),
            &SplitManifest {
                train_services: names(&self.train.schemas),
                dev_services: names(&self.dev.schemas),
                unseen_services: self.unseen_services.clone(),
                config: cfg.clone(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::validate_dialogue;
    use crate::tokenizer::char_slice;

    #[test]
    fn concept_names_are_unique() {
        let mut seen = BTreeSet::new();
        for c in CONCEPTS {
            for n in c.names {
                assert!(seen.insert(n), "duplicate slot name {n}");
            }
            assert!(c.descriptions.len() >= 2);
        }
        for a in ARCHETYPES {
            for k in a.slots {
                assert!(concept(k).is_some(), "{k}");
            }
        }
    }

    #[test]
    fn schemas_are_deterministic_and_valid() {
        let cfg = SynthConfig { num_services: 3, seed: 7, ..Default::default() };
        let a = synth_schemas(&cfg).unwrap();
        assert_eq!(a, synth_schemas(&cfg).unwrap());
        for s in a.all() {
            s.validate().unwrap();
        }
        assert_eq!(a.unseen[0].service_name, "Restaurants_2");
        assert!(a.warnings.is_empty());
        let seen: BTreeSet<_> = a.seen.iter().map(|s| &s.service_name).collect();
        assert!(a.unseen.iter().all(|s| !seen.contains(&s.service_name)));
    }

    #[test]
    fn categorical_fraction_one_makes_everything_categorical() {
        let cfg = SynthConfig { categorical_fraction: 1.0, ..Default::default() };
        let s = synth_schemas(&cfg).unwrap();
        assert!(s.all().iter().flat_map(|x| &x.slots).all(|x| x.is_categorical));
    }

    #[test]
    fn single_paraphrase_pool_warns() {
        let mut cfg = SynthConfig::default();
        cfg.description_paraphrase_pool.insert("city".into(), vec!["the city".into()]);
        let s = synth_schemas(&cfg).unwrap();
        assert_eq!(s.seen[0].slots[0].description, s.unseen[0].slots[0].description);
        assert_eq!(s.warnings.len(), 1);
        assert!(s.warnings[0].contains("city"));
    }

    #[test]
    fn dialogues_validate_and_spans_match_values() {
        let cfg = SynthConfig { dialogues_per_service: 20, domain_switch_fraction: 0.5, ..Default::default() };
        let ds = synth_dataset(&cfg).unwrap();
        for split in [&ds.train, &ds.dev] {
            for d in &split.dialogues {
                crate::schema::check_dialogue_structure(d).unwrap();
                let issues = validate_dialogue(d, &split.schemas);
                assert!(issues.is_empty(), "{}: {issues:?}", d.dialogue_id);
                for (i, t) in d.turns.iter().enumerate() {
                    // system spans refer to the state of the following user turn
                    let user = if t.speaker == Speaker::User { i } else { i + 1 };
                    for f in &t.frames {
                        let state = d.turns[user].frame(&f.service).and_then(|f| f.state.as_ref()).unwrap();
                        for sp in &f.spans {
                            let surface = char_slice(&t.utterance, sp.start, sp.exclusive_end);
                            assert_eq!(state.slot_values.get(&sp.slot).unwrap(), [surface], "{}", d.dialogue_id);
                        }
                    }
                }
            }
        }
        assert!(ds.train.dialogues.iter().any(|d| d.services.len() == 2));
    }

    #[test]
    fn no_switch_means_single_service() {
        let cfg = SynthConfig { domain_switch_fraction: 0.0, dialogues_per_service: 10, ..Default::default() };
        let ds = synth_dataset(&cfg).unwrap();
        assert!(ds.train.dialogues.iter().all(|d| d.services.len() == 1));
        assert_eq!(ds, synth_dataset(&cfg).unwrap());
    }
}
