//! Deterministic synthetic world: a small KB of countries, cities, people,
//! films and government office terms, with templated questions whose
//! answers hinge on the answer's type, its relation path, or its context.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kb::{khop_candidates, KbBuilder, KnowledgeBase};
use crate::text::{
    save_questions, tokenize, ConstraintKind, ConstraintMention, QuestionRecord, RawQuestion,
    TopicMention,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Type,
    Path,
    Context,
}

#[derive(Clone, Debug)]
pub struct ToyWorld {
    pub kb: KnowledgeBase,
    pub train: Vec<QuestionRecord>,
    pub dev: Vec<QuestionRecord>,
    pub test: Vec<QuestionRecord>,
    pub train_categories: Vec<Category>,
    pub dev_categories: Vec<Category>,
    pub test_categories: Vec<Category>,
}

impl ToyWorld {
    /// `dir/kb/{entities.jsonl,relations.jsonl,triples.tsv}` plus
    /// `dir/{train,dev,test}.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.kb.save_dir(&dir.join("kb"))?;
        save_questions(&dir.join("train.jsonl"), &self.train)?;
        save_questions(&dir.join("dev.jsonl"), &self.dev)?;
        save_questions(&dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }
}

const COUNTRIES: [&str; 6] = [
    "astoria", "belmora", "caldera", "dravonia", "elyria", "fernland",
];
const CITIES: [&str; 30] = [
    "norvik", "calmont", "brisa", "tolvar", "quenby", "marlow", "pellin", "sarno", "vetra",
    "ostrel", "danby", "rimsk", "halvor", "lusk", "ternia", "gorvale", "myre", "kessa", "ardent",
    "polby", "zurin", "fallow", "crestol", "winmere", "yarra", "belcourt", "drisk", "ombre",
    "tally", "varn",
];
const LANGUAGES: [&str; 5] = ["astorian", "belmoran", "caldish", "dravic", "elyrian"];
const CURRENCIES: [&str; 5] = ["crown", "florin", "ducat", "thaler", "guilder"];
const FIRST: [&str; 12] = [
    "alma", "boris", "celia", "dmitri", "edith", "felix", "greta", "hugo", "ines", "jonas",
    "katya", "lionel",
];
const LAST: [&str; 10] = [
    "brandt", "castell", "dorn", "ekberg", "falk", "gruber", "holm", "ivers", "jansen", "kovac",
];
const ORGS: [&str; 10] = [
    "northwind trading",
    "silver forge",
    "blue harbor",
    "iron gate",
    "red lantern",
    "stone bridge",
    "green valley",
    "white peak",
    "amber works",
    "cobalt line",
];
const FILMS: [&str; 15] = [
    "the long winter",
    "river of glass",
    "paper moons",
    "the last ferry",
    "quiet hours",
    "salt and ash",
    "the ninth gate",
    "distant shores",
    "cold harvest",
    "a house of cards",
    "burning fields",
    "the hollow crown",
    "night train",
    "echoes",
    "the glass bird",
];
const UNIVERSITIES: [&str; 8] = [
    "halden institute",
    "morrow college",
    "kestrel academy",
    "vale polytechnic",
    "ashford school",
    "linden college",
    "orchard institute",
    "summit academy",
];
const TEAMS: [&str; 8] = [
    "falcons",
    "mariners",
    "wolves",
    "comets",
    "rovers",
    "titans",
    "hornets",
    "stallions",
];
const POSITIONS: [&str; 4] = ["president", "chancellor", "treasurer", "ambassador"];

const RELATIONS: [(&str, &str); 20] = [
    ("capital", "location.country.capital"),
    ("contains", "location.location.contains"),
    ("official_language", "location.country.official_language"),
    ("currency_used", "location.country.currency_used"),
    ("place_of_birth", "people.person.place_of_birth"),
    ("place_of_death", "people.deceased_person.place_of_death"),
    ("nationality", "people.person.nationality"),
    ("employer", "business.employment.employer"),
    ("education", "people.person.education"),
    ("team", "sports.pro_athlete.team"),
    ("directed_by", "film.film.directed_by"),
    ("film_country", "film.film.country"),
    ("release_year", "film.film.release_year"),
    ("headquarters", "organization.organization.headquarters"),
    ("campus_city", "education.university.city"),
    ("team_location", "sports.sports_team.location"),
    (
        "governing_officials",
        "government.governmental_jurisdiction.governing_officials",
    ),
    (
        "office_holder",
        "government.government_position_held.office_holder",
    ),
    (
        "basic_title",
        "government.government_position_held.basic_title",
    ),
    ("from", "government.government_position_held.from"),
];

struct Facts {
    person_names: Vec<String>,
    birth: Vec<usize>,
    death: Vec<usize>,
    director: Vec<usize>,
    /// (country, position, year, holder)
    terms: Vec<(usize, usize, u32, usize)>,
}

fn build_kb(rng: &mut ChaCha8Rng) -> Result<(KnowledgeBase, Facts)> {
    let mut b = KbBuilder::new();
    for (id, full) in RELATIONS {
        b.relation(id, full)?;
    }
    for (i, c) in COUNTRIES.iter().enumerate() {
        b.entity(&format!("country.{i}"), c, "location.country", false)?;
    }
    for (i, c) in CITIES.iter().enumerate() {
        b.entity(&format!("city.{i}"), c, "location.citytown", false)?;
    }
    for (i, l) in LANGUAGES.iter().enumerate() {
        b.entity(&format!("lang.{i}"), l, "language.human_language", false)?;
    }
    for (i, c) in CURRENCIES.iter().enumerate() {
        b.entity(&format!("cur.{i}"), c, "finance.currency", false)?;
    }
    for (i, o) in ORGS.iter().enumerate() {
        b.entity(&format!("org.{i}"), o, "organization.organization", false)?;
    }
    for (i, f) in FILMS.iter().enumerate() {
        b.entity(&format!("film.{i}"), f, "film.film", false)?;
    }
    for (i, u) in UNIVERSITIES.iter().enumerate() {
        b.entity(&format!("univ.{i}"), u, "education.university", false)?;
    }
    for (i, t) in TEAMS.iter().enumerate() {
        b.entity(&format!("team.{i}"), t, "sports.sports_team", false)?;
    }
    for (i, p) in POSITIONS.iter().enumerate() {
        b.entity(
            &format!("pos.{i}"),
            p,
            "government.government_office_or_title",
            false,
        )?;
    }
    let mut names: Vec<(usize, usize)> = (0..FIRST.len())
        .flat_map(|f| (0..LAST.len()).map(move |l| (f, l)))
        .collect();
    names.shuffle(rng);
    let n_people = 60;
    let person_names: Vec<String> = names
        .iter()
        .take(n_people)
        .map(|(f, l)| format!("{} {}", FIRST[*f], LAST[*l]))
        .collect();
    for (i, name) in person_names.iter().enumerate() {
        b.entity(&format!("person.{i}"), name, "people.person", false)?;
    }

    let city = |i: usize| format!("city.{i}");
    let per_country = CITIES.len() / COUNTRIES.len();
    for c in 0..COUNTRIES.len() {
        let cid = format!("country.{c}");
        b.triple(&cid, "capital", &city(c * per_country));
        for k in 0..per_country {
            b.triple(&cid, "contains", &city(c * per_country + k));
        }
        b.triple(
            &cid,
            "official_language",
            &format!("lang.{}", c % LANGUAGES.len()),
        );
        b.triple(
            &cid,
            "currency_used",
            &format!("cur.{}", (c * 2) % CURRENCIES.len()),
        );
    }
    let mut birth = Vec::with_capacity(n_people);
    let mut death = Vec::with_capacity(n_people);
    for p in 0..n_people {
        let pid = format!("person.{p}");
        let bc = rng.gen_range(0..CITIES.len());
        let dc = (bc + rng.gen_range(1..CITIES.len())) % CITIES.len();
        b.triple(&pid, "place_of_birth", &city(bc));
        b.triple(&pid, "place_of_death", &city(dc));
        b.triple(
            &pid,
            "nationality",
            &format!("country.{}", bc / per_country),
        );
        if rng.gen_bool(0.5) {
            b.triple(
                &pid,
                "employer",
                &format!("org.{}", rng.gen_range(0..ORGS.len())),
            );
        }
        if rng.gen_bool(0.5) {
            b.triple(
                &pid,
                "education",
                &format!("univ.{}", rng.gen_range(0..UNIVERSITIES.len())),
            );
        }
        if rng.gen_bool(0.25) {
            b.triple(
                &pid,
                "team",
                &format!("team.{}", rng.gen_range(0..TEAMS.len())),
            );
        }
        birth.push(bc);
        death.push(dc);
    }
    let mut director = Vec::with_capacity(FILMS.len());
    for f in 0..FILMS.len() {
        let fid = format!("film.{f}");
        let d = rng.gen_range(0..n_people);
        b.triple(&fid, "directed_by", &format!("person.{d}"));
        b.triple(
            &fid,
            "film_country",
            &format!("country.{}", rng.gen_range(0..COUNTRIES.len())),
        );
        let yid = format!("year.film.{f}");
        b.entity(&yid, &rng.gen_range(1950..2020).to_string(), "", true)?;
        b.triple(&fid, "release_year", &yid);
        director.push(d);
    }
    for o in 0..ORGS.len() {
        b.triple(
            &format!("org.{o}"),
            "headquarters",
            &city(rng.gen_range(0..CITIES.len())),
        );
    }
    for u in 0..UNIVERSITIES.len() {
        b.triple(
            &format!("univ.{u}"),
            "campus_city",
            &city(rng.gen_range(0..CITIES.len())),
        );
    }
    for t in 0..TEAMS.len() {
        b.triple(
            &format!("team.{t}"),
            "team_location",
            &city(rng.gen_range(0..CITIES.len())),
        );
    }
    // Every office holder is a distinct person with no other short route
    // to the country it governs, so its answer path runs through the term
    // and carries the term's title and date as context.
    let base = b.build()?;
    let near: Vec<Vec<usize>> = (0..COUNTRIES.len())
        .map(|c| khop_candidates(&base, base.resolve(&format!("country.{c}"))?, 2))
        .collect::<Result<_>>()?;
    let mut pool: Vec<usize> = (0..n_people).collect();
    pool.shuffle(rng);
    let mut take_holder = |c: usize| -> usize {
        let i = pool
            .iter()
            .position(|&p| {
                !near[c].contains(&base.resolve(&format!("person.{p}")).expect("declared"))
            })
            .expect("enough distant people");
        pool.remove(i)
    };
    let mut terms = Vec::new();
    for c in 0..COUNTRIES.len() {
        let mut years: Vec<u32> = (1990..2020).collect();
        years.shuffle(rng);
        for (p, &y) in years.iter().take(POSITIONS.len()).enumerate() {
            {
                let t = terms.len();
                let holder = take_holder(c);
                let tid = format!("term.{t}");
                b.entity(
                    &tid,
                    "government position held",
                    "government.government_position_held",
                    false,
                )?;
                b.entity(&format!("year.term.{t}"), &y.to_string(), "", true)?;
                b.triple(&format!("country.{c}"), "governing_officials", &tid);
                b.triple(&tid, "office_holder", &format!("person.{holder}"));
                b.triple(&tid, "basic_title", &format!("pos.{p}"));
                b.triple(&tid, "from", &format!("year.term.{t}"));
                terms.push((c, p, y, holder));
            }
        }
    }
    Ok((
        b.build()?,
        Facts {
            person_names,
            birth,
            death,
            director,
            terms,
        },
    ))
}

/// Question words with the topic mention and an optional date constraint
/// marked by token position.
struct Draft {
    parts: Vec<(String, Option<Mark>)>,
    answers: Vec<String>,
    category: Category,
}

#[derive(Clone, Copy, PartialEq)]
enum Mark {
    Topic,
    Date,
}

impl Draft {
    fn new(category: Category) -> Self {
        Draft {
            parts: Vec::new(),
            answers: Vec::new(),
            category,
        }
    }

    fn words(mut self, text: &str) -> Self {
        if !text.is_empty() {
            self.parts.push((text.to_string(), None));
        }
        self
    }

    fn mark(mut self, text: &str, m: Mark) -> Self {
        self.parts.push((text.to_string(), Some(m)));
        self
    }

    fn answer(mut self, id: String) -> Self {
        self.answers.push(id);
        self
    }

    fn finish(self, topic_id: &str) -> Result<(QuestionRecord, Category)> {
        let mut text = String::new();
        let mut n = 0;
        let (mut topic, mut constraints) = (None, Vec::new());
        for (part, mark) in &self.parts {
            let len = tokenize(part).len();
            match mark {
                Some(Mark::Topic) => {
                    topic = Some(TopicMention {
                        start: n,
                        end: n + len,
                        entity_id: topic_id.to_string(),
                    })
                }
                Some(Mark::Date) => constraints.push(ConstraintMention {
                    start: n,
                    end: n + len,
                    kind: ConstraintKind::Date,
                }),
                None => {}
            }
            n += len;
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(part);
        }
        text.push('?');
        let q = QuestionRecord::from_raw(RawQuestion {
            question: text,
            answers: self.answers,
            topic_mention: topic,
            constraints,
        })?;
        Ok((q, self.category))
    }
}

const TEMPLATES: usize = 8;

fn draft(template: usize, facts: &Facts, rng: &mut ChaCha8Rng) -> (Draft, String) {
    let country = rng.gen_range(0..COUNTRIES.len());
    let person = rng.gen_range(0..facts.birth.len());
    let film = rng.gen_range(0..FILMS.len());
    let per_country = CITIES.len() / COUNTRIES.len();
    let cid = format!("country.{country}");
    let pid = format!("person.{person}");
    match template {
        0 => {
            let (pre, post) = [
                ("what language do people speak in", ""),
                ("what is the official language of", ""),
                ("which language is spoken in", ""),
            ][rng.gen_range(0..3)];
            let d = Draft::new(Category::Type)
                .words(pre)
                .mark(COUNTRIES[country], Mark::Topic)
                .words(post);
            (d.answer(format!("lang.{}", country % LANGUAGES.len())), cid)
        }
        1 => {
            let (pre, post) = [
                ("what currency is used in", ""),
                ("what money do they use in", ""),
                ("which currency does", "use"),
            ][rng.gen_range(0..3)];
            let d = Draft::new(Category::Type)
                .words(pre)
                .mark(COUNTRIES[country], Mark::Topic)
                .words(post);
            (
                d.answer(format!("cur.{}", (country * 2) % CURRENCIES.len())),
                cid,
            )
        }
        2 => {
            let pre = ["who directed", "who was the director of"][rng.gen_range(0..2)];
            let d = Draft::new(Category::Type)
                .words(pre)
                .mark(FILMS[film], Mark::Topic);
            (
                d.answer(format!("person.{}", facts.director[film])),
                format!("film.{film}"),
            )
        }
        3 => (
            Draft::new(Category::Path)
                .words("where was")
                .mark(&facts.person_names[person], Mark::Topic)
                .words("born")
                .answer(format!("city.{}", facts.birth[person])),
            pid,
        ),
        4 => (
            Draft::new(Category::Path)
                .words("where did")
                .mark(&facts.person_names[person], Mark::Topic)
                .words("die")
                .answer(format!("city.{}", facts.death[person])),
            pid,
        ),
        5 => {
            let pre = [
                "what is the capital of",
                "which city is the capital of",
                "what is the capital city of",
            ][rng.gen_range(0..3)];
            let d = Draft::new(Category::Path)
                .words(pre)
                .mark(COUNTRIES[country], Mark::Topic);
            (d.answer(format!("city.{}", country * per_country)), cid)
        }
        6 | 7 => {
            let (c, p, y, holder) = facts.terms[rng.gen_range(0..facts.terms.len())];
            let pre = ["who was the {} of", "who served as {} of"][rng.gen_range(0..2)]
                .replace("{}", POSITIONS[p]);
            let d = Draft::new(Category::Context)
                .words(&pre)
                .mark(COUNTRIES[c], Mark::Topic);
            let d = if template == 6 {
                d.words("in").mark(&y.to_string(), Mark::Date)
            } else {
                d
            };
            (d.answer(format!("person.{holder}")), format!("country.{c}"))
        }
        _ => unreachable!("template index below TEMPLATES"),
    }
}

/// The toy world for `seed`: about 220 entities, 20 relations, 12 entity
/// types, and 100 questions split 60/20/20 with every template in every
/// split.
pub fn toy_world(seed: u64) -> Result<ToyWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kb, facts) = build_kb(&mut rng)?;
    let mut seen = BTreeSet::new();
    let mut all = Vec::with_capacity(100);
    while all.len() < 100 {
        let template = all.len() % TEMPLATES;
        let (d, topic) = draft(template, &facts, &mut rng);
        let key = d
            .parts
            .iter()
            .map(|p| p.0.clone())
            .collect::<Vec<_>>()
            .join(" ");
        if !seen.insert(key) {
            continue;
        }
        all.push(d.finish(&topic)?);
    }
    let mut w = ToyWorld {
        kb,
        train: vec![],
        dev: vec![],
        test: vec![],
        train_categories: vec![],
        dev_categories: vec![],
        test_categories: vec![],
    };
    for (k, (q, cat)) in all.into_iter().enumerate() {
        match k % 5 {
            0..=2 => {
                w.train.push(q);
                w.train_categories.push(cat);
            }
            3 => {
                w.dev.push(q);
                w.dev_categories.push(cat);
            }
            _ => {
                w.test.push(q);
                w.test_categories.push(cat);
            }
        }
    }
    Ok(w)
}
