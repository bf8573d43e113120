"""
Binary LLM-judge prompt emission. The judge itself is never called here.
"""

JUDGE_SYSTEM_PROMPT = """You are a strict QA judge.
Decide correctness by comparing ONLY the ground-truth answer and the model answer. The question may be multiple-choice or open-ended.

OUTPUT:
Return exactly one token with NO quotes/punctuation/spaces/code fences: True or False.

GENERAL RULES:
1) Judge factual/semantic equivalence; ignore phrasing, filler, or reasoning text. If the model's final claim contradicts the ground truth or hedges without committing, return False.
2) Numbers: allow formatting differences (1,000 vs 1000), scientific notation, or rounding that preserves the stated value. If units are present, require the same value after conversion; missing/extra incompatible units => False.
3) Lists/sets: require the same items; order doesn't matter. Missing or extra items => False.
4) Spans/names: accept common synonyms and aliases that uniquely indicate the same entity.
5) If ambiguous, empty, multiple conflicting answers, or cannot be judged, return False.

SPECIAL RULES FOR MULTIPLE-CHOICE (only when options are provided below):
A) Treat option LETTERS and their NUMERIC ORDINALS as equivalent (A=1, B=2, C=3, ...), but ONLY within this question's options.
B) Treat the CORRECT OPTION'S FULL TEXT as equivalent to its letter and numeric index.

Your final output must be only the single token: True or False."""

JUDGE_USER_TEMPLATE = """### Ground Truth
{gold}

### Model Answer
{answer}
{options}
### Decision
Return only one of: True, False."""


def _option_block(options):
    if not options:
        return ""
    lines = [f"{chr(ord('A') + i)}. {text}" for i, text in enumerate(options)]
    return "\n### Options\n" + "\n".join(lines) + "\n"


def build_judge_prompt(gold, answer, options=None):
    """
    Fill the judge template.

    Args:
        gold: Ground-truth answer
        answer: Model answer
        options: Optional option texts, labelled A, B, ... in order

    Returns:
        prompt: {'system': str, 'user': str}
    """
    user = JUDGE_USER_TEMPLATE.format(gold=gold, answer=answer, options=_option_block(options))
    return {"system": JUDGE_SYSTEM_PROMPT, "user": user}


def render_judge_prompt(gold, answer, options=None):
    prompt = build_judge_prompt(gold, answer, options)
    return prompt["system"] + "\n\n" + prompt["user"]
