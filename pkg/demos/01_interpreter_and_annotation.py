"""Walk through the program interpreter and breadth-first pseudo-gold annotation.

Run: python demos/01_interpreter_and_annotation.py
"""

from marlqa import kb as K
from marlqa.kb import Action, KnowledgeBase, execute
from marlqa.taskgen import GenConfig, action_name, bfs_annotate, generate_dataset

ents = ("paris", "lyon", "france", "spain", "madrid")
kb = KnowledgeBase(ents, ("place",), ("capital_of", "city_in"),
                   {e: "place" for e in ents},
                   frozenset({("paris", "capital_of", "france"), ("madrid", "capital_of", "spain"),
                              ("paris", "city_in", "france"), ("lyon", "city_in", "france"),
                              ("madrid", "city_in", "spain")}))

EOS = Action(K.EOS, ())
programs = {
    "cities in france": [Action(K.SELECT_REV, ("france", "city_in")), EOS],
    "how many cities in france": [Action(K.SELECT_REV, ("france", "city_in")),
                                  Action(K.COUNT, ()), EOS],
    "cities in france that are not capitals": [
        Action(K.SELECT_REV, ("france", "city_in")),
        Action(K.SELECT_REV, ("france", "capital_of")),
        Action(K.DIFFERENCE, ()), EOS],
    "is lyon a french city": [Action(K.SELECT_REV, ("france", "city_in")),
                              Action(K.IS_IN, ("lyon",)), EOS],
    "a count with nothing on the stack": [Action(K.COUNT, ()), EOS],
}
print("Programs are postfix: operands are pushed, operators pop them.\n")
for text, prog in programs.items():
    print(f"{text:<42} -> {execute(prog, kb)}")

print("\nNow generated questions. The annotator searches id sequences shortest first")
print("and keeps the first one whose execution equals the gold answer.\n")
data = generate_dataset(GenConfig(categories=(("Simple", 2), ("Logical", 2), ("Quantitative", 2),
                                              ("Verification", 2), ("ComparativeReasoning", 2),
                                              ("QuantCount", 2), ("CompCount", 2))), seed=0)
for q in data.questions[::2]:
    ids = bfs_annotate(q, data.kb, 5)
    text = " ".join(data.vocab[t] for t in q.tokens)
    print(f"[{q.category}] {text}")
    print(f"    gold {q.gold}")
    print(f"    shortest program: {[action_name(a) for a in ids] if ids else None}")
