"""Regenerates the bundled mini corpora. Output is fully determined by SEED.

    python3 make_corpora.py
"""

import json
import os
import random

SEED = 20240611
HERE = os.path.dirname(os.path.abspath(__file__))

DRUGS = [
    "ibuprofen", "acetaminophen", "amoxicillin", "prednisone", "lorazepam", "isoniazid",
    "aceclofenac", "metformin", "atorvastatin", "lisinopril", "omeprazole", "warfarin",
    "heparin", "insulin", "clopidogrel", "levothyroxine", "amlodipine", "furosemide",
    "azithromycin", "ciprofloxacin", "dexamethasone", "methotrexate", "rifampicin",
    "salbutamol", "pantoprazole", "gabapentin", "sertraline", "losartan", "simvastatin",
]
DISEASES = [
    "hyperglycemia", "cirrhosis", "nephropathy", "retinopathy", "neuropathy", "pyrexia",
    "hypertension", "tuberculosis", "pneumonia", "osteoarthritis", "osteoporosis",
    "myocardial infarction", "gastroesophageal reflux", "chronic obstructive pulmonary disease",
    "atrial fibrillation", "heart failure", "rheumatoid arthritis", "hypothyroidism",
    "sepsis", "asthma", "cholecystitis", "pancreatitis", "endometriosis", "hepatitis",
    "thrombocytopenia", "anemia", "migraine", "epilepsy", "psoriasis", "dyslipidemia",
]
PROCEDURES = [
    "endoscopy", "colonoscopy", "angioplasty", "laparoscopic cholecystectomy",
    "electrocardiogram", "echocardiography", "bronchoscopy", "hemodialysis",
    "thrombolytic therapy", "arthroplasty", "appendectomy", "biopsy", "catheterization",
    "radiotherapy", "chemotherapy", "tracheostomy", "mammography", "angiography",
]
OUTCOMES = [
    "postoperative pain", "mortality", "readmission", "glycemic control", "blood pressure",
    "liver function", "renal function", "hospital stay", "symptom relief", "quality of life",
    "adverse events", "infection rate", "recurrence", "inflammatory markers",
]
POPULATIONS = [
    "adult patients", "elderly patients", "children", "pregnant women", "outpatients",
    "intensive care patients", "patients with diabetes", "postmenopausal women", "smokers",
]
DESIGNS = ["randomized controlled trial", "retrospective cohort study", "prospective study",
           "case control study", "systematic review", "cross sectional survey", "pilot study"]

TEMPLATES = [
    "We conducted a {design} of {n} {pop} with {disease}.",
    "Patients received {drug} or placebo for {w} weeks.",
    "The primary outcome was {outcome} after {proc}.",
    "Treatment with {drug} reduced {outcome} compared with {drug2}.",
    "{disease_cap} was associated with increased risk of {disease2}.",
    "Secondary outcomes included {outcome} and {outcome2}.",
    "{proc_cap} was performed in {k} of {n} patients.",
    "No significant difference in {outcome} was observed between groups.",
    "Adverse events included pyrexia, nausea and headache in patients taking {drug}.",
    "These results suggest that {drug} may alleviate {disease} in {pop}.",
    "Further studies are needed to confirm the benefit of {proc} in {disease}.",
    "The incidence of {disease} decreased from {p1} percent to {p2} percent.",
]

GENERAL_SENTENCES = [
    "The city council met on Tuesday to discuss the new park and the budget for roads.",
    "She walked to the market early in the morning to buy fresh bread and fruit.",
    "The team played well in the second half and won the game by three points.",
    "Heavy rain is expected across the region over the weekend with strong winds.",
    "The museum opened a new exhibition about the history of the river and its bridges.",
    "Our neighbors adopted a small dog that likes to sleep in the sun.",
    "The company reported higher sales this year and plans to hire more workers.",
    "Students in the school library were reading books about space and stars.",
    "He fixed the old bicycle and rode it along the coast road to the village.",
    "The recipe calls for two cups of flour, one egg and a little sugar.",
    "Travelers waited at the station because the train was delayed by snow.",
    "The garden was full of flowers, and bees moved from one plant to another.",
    "A new bridge will connect the two sides of the town by next summer.",
    "The film tells the story of a family that moves to a farm in the mountains.",
    "Most people in the survey said they prefer to work from home two days a week.",
    "The teacher asked the class to write a short essay about their favorite place.",
    "Prices for coffee and tea rose slightly during the last three months.",
    "The band played music in the park until late in the evening.",
    "Engineers tested the new software and found a few small problems.",
    "The children built a sand castle on the beach near the old lighthouse.",
]

SYLLABLES = ["ka", "lo", "mi", "re", "tu", "sa", "vo", "ne", "pi", "da", "go", "bu",
             "fe", "zi", "ho", "ja", "wu", "qe", "xo", "yi", "ru", "ta", "me", "ko"]


def abstracts(rng, n):
    out = []
    for i in range(n):
        sentences = []
        for t in rng.sample(TEMPLATES, rng.randint(4, 7)):
            d1, d2 = rng.sample(DISEASES, 2)
            o1, o2 = rng.sample(OUTCOMES, 2)
            dr1, dr2 = rng.sample(DRUGS, 2)
            proc = rng.choice(PROCEDURES)
            n_pat = rng.randint(40, 900)
            sentences.append(t.format(
                design=rng.choice(DESIGNS), n=n_pat, pop=rng.choice(POPULATIONS),
                disease=d1, disease2=d2, disease_cap=d1.capitalize(), drug=dr1, drug2=dr2,
                w=rng.randint(2, 52), outcome=o1, outcome2=o2, proc=proc,
                proc_cap=proc.capitalize(), k=rng.randint(5, n_pat), p1=rng.randint(20, 60),
                p2=rng.randint(2, 19)))
        out.append({"id": f"abs-{i:04d}", "text": " ".join(sentences)})
    return out


def general(rng, n):
    out = []
    for i in range(n):
        k = rng.randint(2, 4)
        out.append({"id": f"gen-{i:04d}", "text": " ".join(rng.sample(GENERAL_SENTENCES, k))})
    return out


def pseudo_words(rng, count):
    words = set()
    while len(words) < count:
        words.add("".join(rng.choice(SYLLABLES) for _ in range(3)))
    words = sorted(words)
    rng.shuffle(words)
    return words


def topic_pairs(rng, n_topics, words_per_side, n_heldout):
    """Each topic owns disjoint query-side and document-side pseudo-words, so a
    query and its positive never share a word: matching them must be learned."""
    words = pseudo_words(rng, n_topics * words_per_side * 2)
    topics = []
    for t in range(n_topics):
        base = t * words_per_side * 2
        topics.append((words[base:base + words_per_side], words[base + words_per_side:base + 2 * words_per_side]))

    def sentence(side, k):
        picked = rng.sample(side, k)
        return " ".join(picked)

    train = []
    for t, (q, d) in enumerate(topics):
        train.append({"query": sentence(q, words_per_side), "positive": sentence(d, words_per_side),
                      "source_id": "synthetic-a" if t % 2 == 0 else "synthetic-b"})
    held = rng.sample(range(n_topics), n_heldout)
    queries, corpus, qrels = [], [], []
    for j, t in enumerate(held):
        q, d = topics[t]
        queries.append({"id": f"q{j:02d}", "text": sentence(q, words_per_side - 1)})
        corpus.append({"id": f"d{j:02d}", "text": sentence(d, words_per_side - 1)})
        qrels.append({"qid": f"q{j:02d}", "did": f"d{j:02d}", "rel": 1})
    return train, queries, corpus, qrels


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")


def main():
    rng = random.Random(SEED)
    write_jsonl(os.path.join(HERE, "medical_abstracts.jsonl"), abstracts(rng, 200))
    write_jsonl(os.path.join(HERE, "general_corpus.jsonl"), general(rng, 120))
    train, queries, corpus, qrels = topic_pairs(rng, 64, 4, 16)
    write_jsonl(os.path.join(HERE, "topic_pairs.jsonl"), train)
    texts = [t for pair in train for t in (pair["query"], pair["positive"])]
    write_jsonl(os.path.join(HERE, "topic_corpus.jsonl"),
                [{"id": f"t{i:03d}", "text": t} for i, t in enumerate(texts)])
    ds = os.path.join(HERE, "topic_retrieval")
    os.makedirs(ds, exist_ok=True)
    write_jsonl(os.path.join(ds, "queries.jsonl"), queries)
    write_jsonl(os.path.join(ds, "corpus.jsonl"), corpus)
    write_jsonl(os.path.join(ds, "qrels.jsonl"), qrels)


if __name__ == "__main__":
    main()
