"""Free-text de-identification walkthrough: typed placeholders, overlap
resolution, idempotence, and the residual-leak audit.

Run:  python demos/02_redaction_leak_audit.py
"""

from prism.redaction import _rehydrate_deid, default_rules, leak_audit, redact
from prism.vault import UserToken

token = UserToken("ab" * 32)
rules = default_rules()

samples = [
    "hi all, I'm Marisol, glad to join this group",
    "ping me at marisol.hibbert3@example-mail.test or 613-555-0142",
    "pickup for the recipe swap is at 12 Maple Street",
    "born 1985-03-12 so this is my milestone year",
    "support asked me to quote member id 84721933",
    "meet at 45.4215, -75.6972 by the trailhead",
    "moved to Ottawa last spring",                     # city-level survives
    "did 12345 steps in 45 minutes",                   # short digit runs survive
]

print("redaction, line by line")
print("-" * 72)
deid = []
for text in samples:
    out = redact(text, token, rules, {"goal": "fitness"})
    deid.append(out)
    print(f"  in : {text}")
    print(f"  out: {out.text}\n")

# Idempotence: placeholders match no rule, so a second pass is the identity.
twice = redact(deid[1].text, token, rules)
print("second pass unchanged:", twice.text == deid[1].text)

# A clean pipeline audits to zero.
print("\nleak audit over the redacted corpus:", leak_audit(deid, rules).to_dict())

# The audit arithmetic on a corpus with residual self-disclosures: two name
# signatures that slipped through an (hypothetical) upstream pass.
corpus = [redact(f"all good, week {i}", token, rules) for i in range(1198)]
corpus.append(_rehydrate_deid("see you all - Marisol", token))
corpus.append(_rehydrate_deid("cheers, Thaddeus", token))
report = leak_audit(corpus, rules)
print(f"\n2 residual hits over 1200 samples -> leak rate {report.leak_rate:.6f}")
