"""Reference model responses for the two prompt kinds, rendered as plain text."""

SAMPLE_PRICE_OUTPUT = """\
- Item: 14K yellow gold pendant with small pear/oval emerald center surrounded by tiny diamonds; listed weight 1.1 g (pre-owned, excellent).
- Gold value: 1.1 g × 14K ≈ 0.64 g pure gold → scrap ≈ $40–45 (at current spot).
- Gem value: small emerald and melee diamonds (no certification) — modest value, roughly $30–$90 combined depending on quality.
- Market factors: unbranded, poor/standard photos, estate find listing style, seller has strong feedback. Comparable small 14K emerald/diamond cluster pendants on eBay typically sell in the ~$80–$150 range.
- Conclusion: reasonable expected sale (used, unbranded, uncertified) near the midpoint of comps.
<final>110</final>"""

SAMPLE_FEEDBACK_OUTPUT = """\
- Amateur smartphone photos on a textured surface, no watermark or studio lighting — individual seller signal.
- Short, confusing description (“I believe gold plated” vs 14k marking) and unbranded item — low professionalism.
- Basic item specifics filled and condition listed as "Pre-owned - Excellent" — minor signal of some eBay familiarity.
- No visible store/returns information or fast/shipping options in listing metadata — no signal for a larger store.
- Inferred price band: $100–$500 (small gold charm ~2.5 g)
<final>18</final>"""
