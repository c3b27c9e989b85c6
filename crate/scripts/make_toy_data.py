#!/usr/bin/env python3
"""Regenerate the bundled toy dataset under data/toy/.

Deterministic: no randomness beyond fixed tables, so reruns are
byte-identical. The fixture file is produced separately by running the
pipeline with the synthetic provider in recording mode (see README).
"""
import json
import os

OUT = os.path.join(os.path.dirname(__file__), "..", "data", "toy")

TOPICS = {
    "cooking": [
        ("Why does my sourdough starter go flat in winter",
         "My starter doubles in summer but barely rises once the kitchen drops below 18 degrees. I feed it daily with equal parts flour and water."),
        ("How do I keep pasta from sticking together after draining",
         "Every batch clumps into a block within 5 minutes of draining. I cook it in a large pot and stir while boiling."),
        ("What makes a good braise for tough cuts of beef",
         "Chuck and shank come out stringy when I roast them. I want the soft texture restaurants get."),
        ("Is resting meat after grilling actually necessary",
         "Some cooks insist on resting steak for 10 minutes, others slice right away. What does resting change?"),
        ("Why did my caramel crystallize into grainy sugar",
         "Halfway through melting the sugar seized into a sandy mass. I stirred constantly and used a steel pan."),
        ("How much salt should pasta water really have",
         "Recipes say salty like the sea but never give numbers. I cook 500 grams of pasta in 4 liters of water."),
        ("What is the safest way to render chicken fat at home",
         "I save trimmings in the freezer and want to render them down for schmaltz without burning anything."),
    ],
    "gardening": [
        ("Why are my tomato leaves curling upward in summer",
         "The plants get 8 hours of sun and deep watering twice a week. Leaves curl but stay green."),
        ("How late can I plant garlic in a cold climate",
         "I am in a zone with first frost in mid October. The cloves are ready but the bed is still full of beans."),
        ("What is the best mulch for suppressing weeds around roses",
         "Bindweed keeps threading through the bed. I can get wood chips, straw, or shredded leaves cheaply."),
        ("Why do my zucchini fruits rot at the blossom end",
         "Fruits reach about 6 centimeters then the tip turns brown and soft. Watering is even and soil was amended."),
        ("Should I prune raspberry canes in fall or spring",
         "The patch is three years old and getting dense. Neighbors disagree about the right season to cut."),
        ("How do I know when compost is ready to use",
         "The pile has cooked for 4 months and looks dark, but some straw is visible. Does it need longer?"),
        ("Can I grow potatoes in the same bed every year",
         "Rotation is hard in a small yard. The crop looked fine last season but I worry about disease building up."),
    ],
    "sysadmin": [
        ("How do I find which process is holding a deleted file open",
         "Disk usage will not drop after removing a 40 GB log file. lsof output is overwhelming on this host."),
        ("Why does my cron job run manually but fail on schedule",
         "The backup script works from my shell yet exits with status 1 under cron. Logs show a missing command."),
        ("What is a sane default for SSH connection keepalives",
         "Long-lived sessions through a NAT gateway drop after a few idle minutes. I control both client and server."),
        ("How should I size swap on a server with 64 GB of RAM",
         "Old guides say twice the RAM which seems absurd now. The box runs a database and a few services."),
        ("Why is rsync slow over a fast local network",
         "Copying 2 TB between two machines with 10 gigabit cards crawls at 80 MB per second. CPUs sit idle."),
        ("How can I tell if a disk is failing before SMART says so",
         "A drive in the array feels sluggish but passes the short self test. Latency spikes show in monitoring."),
        ("What is the right way to rotate logs for a custom daemon",
         "Our service writes a single growing log file. I want rotation without losing lines or restarting the daemon."),
    ],
}

# answer templates per forum: (quality tier, body sentences)
ANSWERS = {
    "cooking": [
        "Temperature drives the fermentation rate more than feeding schedule. A starter at 18 degrees can take 3 times longer to peak than at 26 degrees. Move the jar to the top of the fridge or near the oven light and it will recover. Cutting hydration to 80 percent also slows the collapse so the rise is easier to catch.",
        "Use more water than you think and return the pasta to the pot with a ladle of cooking water. The starch film is what glues strands together once they cool. Tossing with sauce within 2 minutes of draining prevents the clump entirely. Oil in the water does nothing useful because it floats.",
        "Collagen converts to gelatin between 70 and 85 degrees, and that conversion needs hours. Keep the liquid at a bare simmer and give chuck at least 3 hours. Browning first builds the flavor base, and a covered pot holds the moisture that dry roasting loses. The meat is done when a fork twists in with no resistance.",
        "Resting lets the temperature gradient even out so juices thicken and stay in the slice. Five minutes is enough for a steak, closer to 20 for a large roast. Slicing immediately loses a measurable amount of liquid to the board. Tent loosely with foil so the crust does not steam soft.",
        "Crystals form when a few seed crystals hit a saturated syrup, and stirring splashes syrup onto the cool pan walls where seeds form. Wash the walls down with a wet brush or add a spoon of glucose or corn syrup to interfere with crystal growth. Start over rather than rescuing a seized batch. A heavy pan with even heat matters more than the stirring pattern.",
        "One percent salt by water weight is a reliable floor, so 40 grams in 4 liters. The pasta absorbs roughly a quarter of that. Sea-water salinity is 3.5 percent and would be inedible. Adjust up only when the sauce itself is barely seasoned.",
        "Low and slow with a splash of water is the classic method. The water steams the trimmings so they release fat before anything can scorch, then it evaporates and the cracklings brown. Strain through a fine sieve and the fat keeps for 3 months in the fridge. Save the cracklings for salting.",
        "I always just add more flour until it feels right. Works for me.",
        "You could try searching online, there are many videos about this.",
    ],
    "gardening": [
        "Upward leaf curl with normal color is usually heat stress or inconsistent moisture, not a virus. Mulch 5 centimeters deep to even out soil moisture and give afternoon shade in heat waves. Check the newest growth first because physiological curl starts on older leaves. If leaves also yellow and pucker, then look at virus photos.",
        "Garlic needs about 3 weeks to root before the ground freezes, so count back from your frost date. Mid October frost means planting by late September is safer. Cloves planted too late still grow but bulbs come out 20 percent smaller. Mulch with straw after the surface freezes to stop heaving.",
        "Wood chips 8 centimeters deep beat straw for bindweed because the runners cannot photosynthesize through them. Lay cardboard underneath for the first season to cut the existing roots off from light. Keep chips a hand-width from the crown so the canes stay dry. Expect to top up every second year.",
        "That is blossom end rot, a calcium transport problem caused by uneven water, not missing calcium in soil. Water deeply on a fixed schedule and mulch to buffer the swings. The first fruits of the season are the most affected and later ones usually come clean. Foliar calcium sprays are mostly wasted money.",
        "Prune summer-bearing canes right after harvest and leave the new green canes for next year. Fall pruning in cold regions exposes cuts to winter damage. In spring just thin to the strongest 10 canes per meter and top them at chest height. Everbearing types can simply be mowed if you accept one fall crop.",
        "Ready compost smells like forest soil and the original materials are unrecognizable. A handful squeezed should hold shape then crumble. Straw skeletons are fine to screen out and throw back in. If the pile still heats above 40 degrees after turning, let it finish another month.",
        "Potatoes after potatoes invites scab and wireworm to accumulate. Even a two-year rotation with beans or squash cuts the pressure substantially. If you truly cannot rotate, grow certified seed in grow bags with fresh mix. Watch for early dying as the first sign the bed is tired.",
        "My grandmother never rotated anything and her potatoes were fine.",
        "Just water more, that fixes most garden problems in my experience.",
    ],
    "sysadmin": [
        "Use lsof with the +L1 flag to list only files with a link count of zero. The column shows the process id holding each deleted file. Restart or signal that process and the space returns immediately. On systemd hosts, fuser on the mount point is a quicker first pass.",
        "Cron runs with a minimal PATH, usually just /usr/bin and /bin. Your script almost certainly calls a tool that lives in /usr/local/bin. Set PATH explicitly at the top of the script or use absolute paths. Also redirect stderr to a file because cron mails are usually discarded.",
        "Set ServerAliveInterval 60 and ServerAliveCountMax 3 on the client. That sends a keepalive every minute and tears down after 3 missed replies. The NAT table entry stays warm so the session survives idle periods. TCPKeepAlive alone is not enough because middleboxes ignore it.",
        "Twice the RAM made sense when machines had 256 MB. For 64 GB, 4 to 8 GB of swap is plenty as an eviction buffer. What you want to avoid is the database paging, so set swappiness to 10. If you use hibernation you need swap equal to RAM, which servers never do.",
        "Single-stream rsync over ssh is usually cipher bound near 100 MB per second. Switch to rsync daemon mode or use a weaker cipher to remove the bottleneck. For a one-time bulk copy, tar over netcat or a parallel tool saturates 10 gigabit easily. Checksumming also forces reads on both sides, so disable it for the first pass.",
        "Watch the latency percentiles, not the averages. A failing disk shows 99th percentile service times 10 times its peers under the same load. The long self test reads every sector and catches pending reallocations the short test misses. Also check the error counters after each run because a rising raw read error rate is the real signal.",
        "Reopen on SIGHUP is the standard pattern: rotate with logrotate and send the daemon a hangup to reopen its file descriptor. If you cannot change the daemon, use copytruncate and accept a small window of lost lines. Writing to stdout under a supervisor that handles rotation is the cleanest long-term fix. Never rename a file a process still has open and expect new writes in the new file.",
        "Have you tried rebooting the server? That usually clears things up.",
        "We had this exact problem once and never figured it out, good luck.",
    ],
}

# per-post answer layout: (answer template indices, upvotes)
LAYOUTS = [
    ([0, 7, 8], [24, 3, -1]),
    ([1, 8], [15, 4]),
    ([2, 7, 8, 1], [18, 7, 2, 0]),
    ([3, 8, 7], [11, 5, 1]),
    ([4, 1, 8], [9, 6, -2]),
    ([5, 7], [13, 2]),
    ([6, 8, 0], [21, 8, 3]),
]


def main():
    os.makedirs(OUT, exist_ok=True)
    rows = []
    for forum, topics in sorted(TOPICS.items()):
        answers = ANSWERS[forum]
        for t_idx, (title, body) in enumerate(topics):
            qid = f"{forum[0]}q{t_idx:02d}"
            rows.append({
                "id": qid,
                "forum": forum,
                "title": title + "?",
                "body": body,
            })
            template_ids, upvotes = LAYOUTS[t_idx % len(LAYOUTS)]
            for a_idx, (tmpl, votes) in enumerate(zip(template_ids, upvotes)):
                rows.append({
                    "id": f"{qid}a{a_idx}",
                    "question_id": qid,
                    "forum": forum,
                    "body": answers[tmpl],
                    "upvotes": votes,
                    "author_id": f"user{(t_idx * 3 + a_idx) % 11}",
                })
    with open(os.path.join(OUT, "posts.jsonl"), "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    judgments = {
        "0:human>human": 0.791,
        "1:human>human": 0.739,
        "2:llm_open_book>llm_closed_book": 0.574,
        "3:human>llm_corrupted": 0.610,
        "3:llm_closed_book>llm_corrupted": 0.719,
        "3:llm_open_book>llm_corrupted": 0.745,
        "4:llm_open_book>llm_irrelevant_grounding": 0.890,
        "5:llm_combined>human": 0.803,
    }
    with open(os.path.join(OUT, "judgments.json"), "w") as fh:
        json.dump(judgments, fh, indent=2, sort_keys=True)
        fh.write("\n")

    # a few annotated pairs for the agreement metric: majority prefers the
    # detailed answer (a) over the throwaway one (b)
    annotations = []
    for forum, topics in sorted(TOPICS.items()):
        answers = ANSWERS[forum]
        title, body = topics[0]
        annotations.append({
            "question": title + "?\n" + body,
            "answer_a": answers[0],
            "answer_b": answers[8],
            "votes": ["a", "a", "b"],
        })
        title, body = topics[2]
        annotations.append({
            "question": title + "?\n" + body,
            "answer_a": answers[2],
            "answer_b": answers[7],
            "votes": ["a", "a", "a"],
        })
        title, body = topics[4]
        annotations.append({
            "question": title + "?\n" + body,
            "answer_a": answers[8],
            "answer_b": answers[4],
            "votes": ["b", "b", "a"],
        })
    with open(os.path.join(OUT, "annotations.jsonl"), "w") as fh:
        for row in annotations:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    print(f"wrote {len(rows)} rows, {len(judgments)} judgments, {len(annotations)} annotations")


if __name__ == "__main__":
    main()
