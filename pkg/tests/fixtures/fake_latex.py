"""
Offline stand-in for latexmk, used by tests as curation.compile_cmd

    fake_latex.py <root.tex>

- unbalanced braces or an \\undefined... control sequence: exit 1 with "file:line: message"
- \\loopforever: never returns
- otherwise writes <root>.pdf with the non-command text lines and <root>.log
"""

import os
import re
import sys
import time

import fitz

UNDEFINED = re.compile(r"\\undefined\w*")


def check(path: str, text: str, log: list) -> bool:
    depth = 0
    for number, line in enumerate(text.splitlines(), 1):
        if "\\loopforever" in line:
            while True:
                time.sleep(1)
        match = UNDEFINED.search(line)
        if match:
            log.append(f"{path}:{number}: Undefined control sequence.")
            log.append(f"l.{number} {match.group(0)}")
            return False
        depth += len(re.findall(r"(?<!\\)\{", line)) - len(re.findall(r"(?<!\\)\}", line))
        if depth < 0:
            log.append(f"{path}:{number}: Too many }}'s.")
            return False
    if depth != 0:
        log.append(f"{path}:{len(text.splitlines())}: File ended while scanning use of a group.")
        return False
    return True


def render(stem: str, lines: list):
    doc = fitz.open()
    page, y = doc.new_page(), 72
    for line in lines:
        if y > 760:
            page, y = doc.new_page(), 72
        page.insert_text((72, y), line, fontsize=10)
        y += 14
    doc.save(f"{stem}.pdf")
    doc.close()


def main(argv) -> int:
    root = argv[1]
    stem = os.path.splitext(root)[0]
    log = [f"This is fake-latex, compiling {root}"]
    body = []
    ok = True
    for directory, _, files in sorted(os.walk(".")):
        for name in sorted(files):
            if not name.endswith(".tex"):
                continue
            path = os.path.relpath(os.path.join(directory, name))
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
            ok = check(path, text, log) and ok
            body.extend(line.strip() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("\\"))

    with open(f"{stem}.log", "w", encoding="utf-8") as f:
        f.write("\n".join(log) + "\n")
    if not ok:
        print("\n".join(log))
        return 1
    render(stem, body or ["(empty)"])
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
