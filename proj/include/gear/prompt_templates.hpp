#pragma once

// Generation prompt templates. Byte-identical copies live in prompts/*.txt.

#include <string_view>

namespace gear::templates {

inline constexpr std::string_view bp1_template = R"GEARTPL(Given the definition {definition}, generate a list of {k} terms defined by that definition assuming they are in {dictionary} dictionary. Only give me a list back, do not generate any other text.

{dictionary} is {description}

The returned list should follow the following conditions:
- Terms should be ranked, with the first term being the most related to the definition.
- In a JSON object of the form { "terms": ["term_1", "term_2", ... ] }.
- All terms should be in lowercase.

Example:

INPUT:
"A piece of furniture for sitting."

OUTPUT:
{ "terms": ["chair", "stool", "bench", "sofa", "couch"] }
)GEARTPL";

inline constexpr std::string_view bp2_template = R"GEARTPL(Given the definition {definition}, generate a list of {k} terms defined by that definition assuming they are in {dictionary} dictionary. Only give me a list back, do not generate any other text.

{dictionary} is {description}

These are some examples of definitions and terms in this dictionary: {examples}

The returned list should follow the following conditions:
- Terms should be ranked, with the first term being the most related to the definition.
- In a JSON object of the form { "terms": ["term_1", "term_2", ... ] }.
- All terms should be in lowercase.

Example:

INPUT:
"A piece of furniture for sitting."

OUTPUT:
{ "terms": ["chair", "stool", "bench", "sofa", "couch"] }
)GEARTPL";

inline constexpr std::string_view rp_template = R"GEARTPL(Given the definition {definition}, generate a list of {k} terms defined by that definition assuming they are in {dictionary} dictionary. Only give me a list back, do not generate any other text.

{dictionary} is {description}

These are some examples of definitions and terms in this dictionary: {examples}

For each term, provide an example usage in a sentence that matches the style and scope of {dictionary}.

The returned list should follow the following conditions:
- Terms should be ranked, with the first term being the most related to the definition.
- All terms and examples should be in lowercase.
- Return the terms and examples in a JSON object of the form:

{
  "terms": [
    { "term": "term_1", "example": "example_1" },
    { "term": "term_2", "example": "example_2" },
    ...
  ]
}

Example:

INPUT:
"A piece of furniture for sitting."

OUTPUT:
{
  "terms": [
    {
      "term": "chair",
      "example": "he sat on the chair and opened his book."
    },
    {
      "term": "stool",
      "example": "she perched on the stool at the bar."
    },
    {
      "term": "bench",
      "example": "they rested on the bench after their walk."
    },
    {
      "term": "sofa",
      "example": "the family gathered on the sofa to watch TV."
    },
    {
      "term": "couch",
      "example": "he stretched out on the couch to take a nap."
    }
  ]
}
)GEARTPL";

}  // namespace gear::templates
