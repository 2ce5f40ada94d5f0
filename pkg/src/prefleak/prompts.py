"""Role prompt rendering for buyer, seller, inference and persona-redaction agents."""

from __future__ import annotations

from collections.abc import Sequence

from prefleak.core import Instruction, Product, format_cents, numeric_pack, scaffolds


def render_buyer_prompt(instruction: Instruction) -> str:
    packs = scaffolds()
    if instruction.form == "verbal":
        assert instruction.profile is not None
        block = packs["verbal_block"].format(description=instruction.profile.description)
    else:
        assert instruction.budget is not None and instruction.privacy_directive is not None
        sentence = numeric_pack().budget_sentence.format(budget=format_cents(instruction.budget))
        block = packs["numeric_block"].format(
            budget_sentence=sentence, privacy_directive=instruction.privacy_directive
        )
    return packs["buyer"][instruction.scaffold].format(consumer_block=block)


def catalog_line(product: Product) -> str:
    return f"- {product.code}: {product.description} Rated {product.rating}/5. {product.tier}. {format_cents(product.price)}"


def render_seller_prompt(catalog: Sequence[Product]) -> str:
    if not catalog:
        raise ValueError("seller catalog must not be empty")
    lines = "\n".join(catalog_line(p) for p in catalog)
    return scaffolds()["seller"].format(count=len(catalog), catalog_lines=lines)


def render_inference_prompt() -> str:
    return scaffolds()["inference"]


def render_persona_redaction_prompt() -> str:
    return scaffolds()["persona_redaction"]
