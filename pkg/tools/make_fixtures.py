"""Regenerate the bundled fixtures under src/dermpipe/data/.

    python tools/make_fixtures.py

Writes:
  appendix/  one worked MAC debate (5 candidates, one revision round)
  demo/      10 synthetic cases + a scripted backend covering a full MAC run
  apo_toy/   5 draft/reference pairs + a scripted critic and aligner
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "dermpipe" / "data"


def tiny_png(rgb: tuple[int, int, int], size: int = 4) -> bytes:
    def chunk(tag: bytes, body: bytes) -> bytes:
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)

    row = b"\x00" + bytes(rgb) * size
    raw = zlib.compress(row * size, 9)
    ihdr = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", raw) + chunk(b"IEND", b"")


def dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def title(name: str) -> str:
    return " ".join(w if w == "or" else w.capitalize() for w in name.split())


# -- appendix -----------------------------------------------------------------

APPENDIX_OBSERVATION = (
    "The skin condition, as shown in the images, presents widespread erythematous patches with violaceous hues "
    "across the leg. The patient has multiple crusted plaques and erosions, with sizes varying from a few "
    "millimeters to several centimeters. Some lesions have a serpiginous border, suggesting an active edge. The "
    "skin's texture looks lichenified in some places, indicating chronicity, and scaling is evident across various "
    "regions, signaling some level of dryness and exfoliation. Some patches have merged, forming a larger area of "
    "affected skin. Signs of excoriations are present, most likely due to itching, and scattered pustules can also "
    "be observed."
)
APPENDIX_QUERY = (
    "Please help take a look, what kind of skin disease is this? Suffering from the disease for more than 10 "
    "years.  It is recurrent and is very itchy!  It happens wherever I scratch in some places."
)
APPENDIX_CANDIDATES = [
    "prurigo nodularis",
    "chronic eczema",
    "psoriasis",
    "lichen simplex chronicus",
    "allergic or irritant contact dermatitis",
]
APPENDIX_SPECIALISTS = ["Rick", "Sam", "Alex", "Jordan", "Michael"]

RICK_FINDING = """As Diagnostic Specialist Rick,

Assigned Diagnosis: Prurigo Nodularis.

Supporting Evidence for Prurigo Nodularis: The indications of chronic scratching or rubbing like lichenification suggest that the rash could be Prurigo Nodularis. The patient's description of the condition as being very itchy and recurrent over a span of more than a decade also aligns with this diagnosis. In addition, the presence of scattered pustules can also be seen in cases of Prurigo Nodularis.

Critiques for Other Diseases:
1. **Chronic Eczema**: This condition also presents an itchy rash that can become lichenified from chronic scratching, but usually has a more defined pattern of eruption that is not described here.
2. **Psoriasis**: While this condition presents chronic plaques, they usually exhibit a characteristic silvery scale. No such description is provided here.
3. **Lichen Simplex Chronicus**: While this condition is characterized by lichenification, it generally affects a specific region rather than having a widespread distribution as described here.
4. **Allergic or Irritant Contact Dermatitis**: These conditions generally present rapidly after contact with an offending substance, which does not fit the chronic, decade-long presentation described here.

**CALL COORDINATOR** to validate completion."""

COORDINATOR_COMPILATION = """Thank you for your findings, Michael.

As the Coordinator, I acknowledge the completion of Michael's analysis regarding 'allergic or irritant contact dermatitis'.

**Compiling Findings**

I'll now compile and categorize the generated evidences and critiques for each potential disease:
1. **Prurigo Nodularis**
- Supporting Evidence: Chronic scratching or rubbing and recurrent itchiness over a decade. Presence of scattered pustules.
- Consolidated Critiques: More defined pattern of eruption for Chronic Eczema is missing. No silver scales as in Psoriasis. More localized presentation expected as in Lichen Simplex Chronicus. No acute flare-ups post exposure as in Contact Dermatitis.
2. **Chronic Eczema**
- Supporting Evidence: Widespread and merging erythematous patches, lichenified skin at some regions and itchiness wherever scratched.
- Consolidated Critiques: Prurigo Nodularis typically presents hard, itchy lumps. Silvery scales typical to Psoriasis missing. Lichen Simplex Chronicus is usually localized.
3. **Psoriasis**
- Supporting Evidence: Widespread plaques, lichenified skin and scaling.
- Consolidated Critiques: In Prurigo Nodularis itching is more generalized. No typical eczema characteristics like weeping, oozing. Lichen Simplex Chronicus usually is localized.
4. **Lichen Simplex Chronicus**
- Supporting Evidence: Lichenification of skin due to chronic rubbing, intense itchiness, especially in localized areas, plus the serpiginous border.
- Consolidated Critiques: Larger areas of affected skin unlike Prurigo Nodularis. No oozing or crusting unlike Chronic Eczema. Silvery scale of Psoriasis missing. Contact Dermatitis usually presents acute symptoms post exposure.
5. **Allergic or Irritant Contact Dermatitis**
- Supporting Evidence: Chronic dryness, exfoliation, and itching response to certain irritants.
- Consolidated Critiques: Doesn't describe nodules typical to Prurigo Nodularis. Not enough weeping and crusting for Chronic Eczema. No silvery scaly plaques like Psoriasis. Lichen Simplex Chronicus is usually localized.

As the Coordinator, I present the compiled evidence to the Admin for a final evaluation on this patient's skin condition."""

ADMIN_REVISE = """As the Admin,

Thank you, Coordinator, for compiling the findings.

Firstly, it's noticeable that the given evidences for "Allergic or Irritant Contact Dermatitis" and "Psoriasis" are relatively weak compared to other diagnoses. I agree with the critiques that the chronicity and absence of typical defining characteristics such as acute flare-ups in the case of dermatitis and silvery scales in the case of psoriasis make these diagnoses less likely.

Focusing on "Prurigo Nodularis", the evidence is plausible but the image description does not mention the typical nodular lumps that are characteristic of this disease.

"Lichen Simplex Chronicus" has supportive evidence that strongly aligns with chronic itching and lichenification, yet the widespread presence of the disease contradicts the usual localized occurrence of this condition.

"Chronic Eczema" also aligns well with the majority of described symptoms, including itching, chronicity, and lichenification. The absence of strong objections in the critiques and aforementioned aligning symptoms gives strength to this diagnosis.

Considering all compiled evidence and critiques, it seems that Chronic Eczema might be the most likely diagnosis given the available information. However, some uncertainty remains due to overlapping symptoms with other conditions and the lack of additional diagnostic tests.

Diagnostic Specialist Sam, I would like you to enhance your evidence for 'Chronic Eczema' in light of the critiques provided by other specialists. Please refer to the following critiques and provide more specific details that distinguish Chronic Eczema from other conditions:

1. Prurigo Nodularis: Your analysis could benefit from addressing whether or not the absence of nodules is indeed conclusive evidence against this diagnosis.

2. Lichen Simplex Chronicus: Can you further explain the distinguishing factors between these two conditions? Specifically, consider the details regarding distribution and impact of itch-induced scratching.

3. Identification or ruling out of 'Allergic or Irritant Contact Dermatitis': Please provide more info that can make this differentiation clearer.

REVISE: Sam"""

SAM_REFINED = """As Diagnostic Specialist Sam,

Enhanced Evidence for 'Chronic Eczema':

To revisit and strengthen my diagnosis supporting Chronic Eczema, let's address the critiques:

1. Absence of nodules in Prurigo Nodularis: Prurigo Nodularis is characterized by hard, itchy nodules which may be paired with lichenification because of chronic scratching. However, such nodules are not explicitly reported in this clinical presentation. Instead, we note widespread erythematous patches with various sizes and serpiginous borders, a pattern more consistent with chronic eczema.

2. Distinguishing features between Chronic Eczema and Lichen Simplex Chronicus: Though both conditions show lichenification due to chronic scratching, they do have differing behaviors. Lichen Simplex Chronicus usually exhibits itself in one or two specific regions of the body, whereas Chronic Eczema can affect larger, more widespread areas as described in this clinical case. Thus, the widespread distribution here lends more credence to a diagnosis of Chronic Eczema rather than the typically localized Lichen Simplex Chronicus.

3. Differentiating between Chronic Eczema and Allergic or Irritant Contact Dermatitis: Contact Dermatitis generally surfaces as an acute flare-up following exposure to a particular substance and often resolves once the irritant or allergen is avoided, whereas Chronic Eczema's cause is multifactorial - influenced not only by external irritants but also by internal factors, such as the patient's immune response. Furthermore, Chronic Eczema exhibits a distinctive pattern of flares and subsiding inflammation over time. This history of enduring for over a decade and recurrent nature of the skin condition directs more towards Chronic Eczema.

Overall, despite sharing common symptoms like itching and skin alterations with the mentioned conditions, Chronic Eczema appears to fit best given the specifics of the condition's distribution and chronicity."""

ADMIN_FINAL = """As the Admin,

Thank you, Sam, for the enhanced evidence and Coordinator for your facilitation.

Taking into account the evidences and critiques from all Diagnostic Specialists and the enhanced evidence provided by Sam, I conclude that in the absence of any further diagnostic tests or additional information, the most accurate diagnosis among the provided probable diseases for this case is Chronic Eczema. The patient's long term history, reported symptoms like itching wherever the patient scratches, the recurrent nature of the condition, and clinical information like widespread erythematous patches all point towards Chronic Eczema.

Please **TERMINATE** the conversation, Coordinator."""

# The source shows only Rick's turn; the other four are written in the same shape.
_OTHER_EVIDENCE = {
    "chronic eczema": "Widespread and merging erythematous patches, lichenified skin at some regions and itchiness "
    "wherever scratched, recurring over more than ten years.",
    "psoriasis": "Widespread plaques, lichenified skin and scaling across several regions of the leg.",
    "lichen simplex chronicus": "Lichenification of skin due to chronic rubbing, intense itchiness, plus the "
    "serpiginous border.",
    "allergic or irritant contact dermatitis": "Chronic dryness, exfoliation, and an itching response that could "
    "follow repeated contact with irritants.",
}
_CRITIQUE_OF = {
    "prurigo nodularis": "No hard nodular lumps are described, which this condition usually shows.",
    "chronic eczema": "Weeping and crusting are less prominent than usual for this condition.",
    "psoriasis": "The characteristic silvery scale is not described.",
    "lichen simplex chronicus": "It is usually localized, while this eruption is widespread.",
    "allergic or irritant contact dermatitis": "No acute flare after a clear exposure is reported.",
}


def specialist_reply(name: str, disease: str, others: list[str]) -> str:
    lines = [f"As Diagnostic Specialist {name},", "", f"Assigned Diagnosis: {title(disease)}.", ""]
    lines.append(f"Supporting Evidence for {title(disease)}: {_OTHER_EVIDENCE[disease]}")
    lines += ["", "Critiques for Other Diseases:"]
    lines += [f"{i}. **{title(o)}**: {_CRITIQUE_OF[o]}" for i, o in enumerate(others, start=1)]
    return "\n".join(lines)


def make_appendix() -> None:
    out = DATA / "appendix"
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "images" / "leg.png").write_bytes(tiny_png((180, 90, 110)))
    dump(
        out / "case.json",
        {
            "case_id": "appendix",
            "query": APPENDIX_QUERY,
            "image_paths": ["images/leg.png"],
            "ground_truth": "Chronic Eczema",
            "candidates": APPENDIX_CANDIDATES,
            "clinical_observation": APPENDIX_OBSERVATION,
            "specialist_names": APPENDIX_SPECIALISTS,
        },
    )
    rules = [
        {
            "agent": "Coordinator",
            "responses": [
                "As the Coordinator, I assign: Rick - prurigo nodularis; Sam - chronic eczema; Alex - psoriasis; "
                "Jordan - lichen simplex chronicus; Michael - allergic or irritant contact dermatitis. "
                "Rick, please begin.",
                COORDINATOR_COMPILATION,
            ],
        },
        {"agent": "Rick", "responses": [RICK_FINDING]},
    ]
    for name, disease in zip(APPENDIX_SPECIALISTS[1:], APPENDIX_CANDIDATES[1:]):
        others = [c for c in APPENDIX_CANDIDATES if c != disease]
        responses = [specialist_reply(name, disease, others)]
        if name == "Sam":
            responses.append(SAM_REFINED)
        rules.append({"agent": name, "responses": responses})
    rules.append({"agent": "Admin", "responses": [ADMIN_REVISE, ADMIN_FINAL]})
    dump(out / "script.json", {"rules": rules})


# -- demo corpus --------------------------------------------------------------

DEMO = [
    # case_id, ground truth, candidates, index of the final diagnosis, revision round?
    ("demo01", "chronic eczema", ["chronic eczema", "psoriasis", "lichen simplex chronicus"], 0, False),
    ("demo02", "psoriasis", ["seborrheic dermatitis", "psoriasis", "tinea corporis", "pityriasis rosea"], 1, True),
    ("demo03", "myxoid cyst", ["myxoid cyst", "ganglion cyst", "wart", "giant cell tumor", "epidermoid cyst"], 0, False),
    ("demo04", "urticaria", ["urticaria", "erythema multiforme", "insect bite reaction"], 2, False),
    ("demo05", "acne vulgaris", ["rosacea", "acne vulgaris", "folliculitis", "perioral dermatitis"], 1, True),
    ("demo06", None, ["tinea pedis", "dyshidrotic eczema", "pitted keratolysis"], 0, False),
    ("demo07", "herpes zoster", ["herpes zoster", "herpes simplex", "contact dermatitis", "bullous impetigo"], 0, False),
    ("demo08", "vitiligo", ["pityriasis alba", "tinea versicolor", "vitiligo"], 2, True),
    ("demo09", None, ["seborrheic keratosis", "melanocytic nevus", "melanoma", "dermatofibroma"], 0, False),
    ("demo10", "scabies", ["atopic dermatitis", "scabies", "prurigo nodularis", "papular urticaria", "insect bite reaction"], 0, False),
]
DEMO_QUERIES = {
    "demo01": "Itchy dry patches on both forearms for years, worse in winter.",
    "demo02": "Red scaly plaques on elbows and knees that keep coming back.",
    "demo03": "A small clear bump near the nail of my thumb, sometimes leaks fluid.",
    "demo04": "Raised itchy welts that appear and disappear within hours.",
    "demo05": "Red bumps and blackheads on my cheeks and forehead since my teens.",
    "demo06": "Peeling, itchy skin between the toes with a smell.",
    "demo07": "Painful blisters in a band on one side of my chest.",
    "demo08": "White patches on my hands that are slowly spreading.",
    "demo09": "A brown waxy spot on my back that looks stuck on.",
    "demo10": "Very itchy small bumps on wrists and between fingers, worse at night; my partner itches too.",
}
DEMO_REFERENCES = {
    "demo01": ["It is chronic eczema. Use moisturizers and a topical steroid.", {"text": "Chronic eczema, keep the skin moisturized.", "weight": 0.6}],
    "demo02": ["This is psoriasis. Topical steroids and vitamin D creams help."],
    "demo03": ["It is a myxoid cyst. It can be drained or removed by a surgeon."],
    "demo05": ["Acne vulgaris. Start with topical retinoids and benzoyl peroxide."],
    "demo07": ["This is herpes zoster, shingles. Start antiviral medication soon."],
    "demo10": ["Think of scabies. Treat everyone in the house with permethrin cream."],
}
COLOURS = [(200, 120, 100), (210, 90, 90), (230, 200, 180), (240, 150, 150), (190, 110, 90),
           (220, 210, 170), (200, 60, 70), (245, 240, 235), (140, 100, 70), (215, 140, 120)]


def marker_reply(name: str, disease: str, others: list[str]) -> str:
    lines = [f"I am {name}. Looking at the images and the history:",
             f"EVIDENCE: The distribution and morphology are typical of {disease}."]
    lines += [f"CRITIQUE {o}: Key features of {o} are absent in this presentation." for o in others]
    return "\n".join(lines)


def make_demo() -> None:
    out = DATA / "demo"
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, rules = [], []
    calls = 0

    def add(responses: list[str], **filters) -> None:
        nonlocal calls
        calls += len(responses)
        rules.append({**filters, "responses": responses})

    for (case_id, gt, cands, final_idx, revise), colour in zip(DEMO, COLOURS):
        img = f"images/{case_id}.png"
        (out / img).write_bytes(tiny_png(colour))
        rec = {"case_id": case_id, "query": DEMO_QUERIES[case_id], "image_paths": [img], "ground_truth": gt,
               "split": "validation"}
        if case_id in DEMO_REFERENCES:
            rec["references"] = DEMO_REFERENCES[case_id]
        records.append(rec)

        listing = json.dumps([title(c) for c in cands])
        add([f"The lesion pattern suggests a short differential.\n```json\n{listing}\n```"],
            stage="retrieval", case_id=case_id)
        add([f"Image shows lesions compatible with the complaint: {DEMO_QUERIES[case_id].lower()}"],
            stage="mac", case_id=case_id, agent="Observer")
        add(["Assignments announced. Specialist_1, please begin.",
             f"Compiled findings for {len(cands)} probable diseases are ready for the Admin."],
            stage="mac", case_id=case_id, agent="Coordinator")
        names = [f"Specialist_{i}" for i in range(1, len(cands) + 1)]
        final = cands[final_idx]
        for i, (name, disease) in enumerate(zip(names, cands)):
            responses = [marker_reply(name, disease, [c for c in cands if c != disease])]
            if revise and i == final_idx:
                responses.append(f"Enhanced evidence: the lesions and history fit {disease} better than the others.")
            add(responses, stage="mac", case_id=case_id, agent=name)
        admin = []
        if revise:
            admin.append(f"The evidence is close. {names[final_idx]}, strengthen your case.\nREVISE: {names[final_idx]}")
        admin.append(f"Weighing all findings.\nFINAL_DIAGNOSIS: {title(final)}\nTERMINATE")
        add(admin, stage="mac", case_id=case_id, agent="Admin")
        add([f"Based on the images, the most probable condition is {title(final)}. I recommend seeing a "
             f"dermatologist for a treatment plan suited to {final}."], stage="align", case_id=case_id, agent="drafter")
        add([f"It is {final}. Treat it as advised and follow up if it does not improve."],
            stage="align", case_id=case_id, agent="aligner")

    (out / "dataset.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    dump(out / "script.json", {"rules": rules})
    dump(out / "expected.json", {"calls": calls, "cases": len(DEMO)})
    (out / "config.toml").write_text(
        'dataset_path = "dataset.jsonl"\n'
        'script_path = "script.json"\n'
        'retrieval_strategy = "naive_cot"\n'
        'rerank_strategy = "mac"\n'
        "max_candidates = 5\n"
        "seed = 7\n"
        "max_concurrency = 4\n"
        'judge_mode = "exact"\n',
        encoding="utf-8",
    )


# -- APO toy ------------------------------------------------------------------

APO_PAIRS = [
    ("p1", "Based on the visual descriptions, it seems like the most probable condition is Chronic Eczema. I recommend "
           "applying topical steroids and moisturizers regularly for treatment.",
     "Think of eczema. Use moisturizers and topical steroids regularly."),
    ("p2", "After carefully reviewing the image, the findings appear consistent with a Myxoid Cyst, which is a benign "
           "lesion. Surgical consultation could be considered.",
     "It is a myxoid cyst. A surgeon can remove it."),
    ("p3", "The presentation seems to suggest Psoriasis given the scaly plaques. Treatment options might include "
           "topical corticosteroids and vitamin D analogues.",
     "This is psoriasis. Use topical steroids and vitamin D cream."),
    ("p4", "Considering the distribution of the lesions, this could possibly be Urticaria. Antihistamines may help "
           "in controlling the symptoms.",
     "It is urticaria. Take antihistamines."),
    ("p5", "From the description provided, the condition might be Acne Vulgaris. It may be worth trying topical "
           "retinoids and benzoyl peroxide.",
     "This is acne. Use topical retinoids and benzoyl peroxide."),
]
LEARNED_TITLE = "Lead With The Diagnosis"
WORSE_TITLE = "Elaborate At Length"
GOOD_REWRITES = {
    "p1": "Think of eczema. Use moisturizers and topical steroids regularly.",
    "p2": "It is a myxoid cyst. A surgeon can remove it.",
    "p3": "This is psoriasis. Use topical steroids and vitamin D cream.",
    "p4": "It is urticaria. Take antihistamines daily.",
    "p5": "This is acne vulgaris. Use topical retinoids and benzoyl peroxide.",
}
WEAK_REWRITES = {
    "p1": "The condition is most likely chronic eczema. Apply moisturizers and topical steroids regularly.",
    "p2": "The lesion looks like a benign myxoid cyst. A surgeon could consider removing it.",
    "p3": "The scaly plaques suggest psoriasis. Topical corticosteroids and vitamin D cream can help.",
    "p4": "The lesions are likely urticaria. Antihistamines should control the symptoms.",
    "p5": "The condition looks like acne vulgaris. Try topical retinoids and benzoyl peroxide.",
}
WORSE_REWRITES = {
    "p1": "Many possibilities exist and a careful evaluation over several visits would be needed before any advice.",
    "p2": "Many possibilities exist and a careful evaluation over several visits would be needed before any advice.",
    "p3": "Many possibilities exist and a careful evaluation over several visits would be needed before any advice.",
    "p4": "Many possibilities exist and a careful evaluation over several visits would be needed before any advice.",
    "p5": "Many possibilities exist and a careful evaluation over several visits would be needed before any advice.",
}


def make_apo_toy() -> None:
    out = DATA / "apo_toy"
    out.mkdir(parents=True, exist_ok=True)
    (out / "pairs.jsonl").write_text(
        "".join(json.dumps({"case_id": c, "draft": d, "reference": r}) + "\n" for c, d, r in APO_PAIRS),
        encoding="utf-8",
    )
    improved = {"rules": [
        {"title": LEARNED_TITLE, "example": "It is psoriasis.",
         "explanation": "Open with the diagnosis in a few words, then name the treatment."},
        {"title": "Simplify and Be Direct", "example": "The condition is Chronic Eczema.",
         "explanation": "Use short sentences and plain words."},
    ]}
    worse = {"rules": [
        {"title": WORSE_TITLE, "example": "There are many possibilities to consider.",
         "explanation": "Discuss every possibility before giving advice."},
    ]}
    rules = []
    for case_id, _, _ in APO_PAIRS:
        rules.append({"stage": "align", "case_id": case_id, "contains": LEARNED_TITLE,
                      "responses": [GOOD_REWRITES[case_id]], "repeat_last": True})
        rules.append({"stage": "align", "case_id": case_id, "contains": WORSE_TITLE,
                      "responses": [WORSE_REWRITES[case_id]], "repeat_last": True})
        rules.append({"stage": "align", "case_id": case_id,
                      "responses": [WEAK_REWRITES[case_id]], "repeat_last": True})
    rules.append({"stage": "apo", "responses": [
        "Shorter and more direct replies should help.\n```json\n" + json.dumps(improved, indent=2) + "\n```",
        "I would change rule 2 to be more specific, and maybe merge rules 3 and 4.",
        "```json\n" + json.dumps(worse, indent=2) + "\n```",
    ], "repeat_last": True})
    dump(out / "script.json", {"rules": rules})


if __name__ == "__main__":
    make_appendix()
    make_demo()
    make_apo_toy()
    print(f"fixtures written under {DATA}")
